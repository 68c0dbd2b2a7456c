"""Run configuration: one INI file with [model]/[train]/[dsp]/[synthetic]/[run]
sections, every key overridable from the command line, unknown keys rejected.
Values are JSON-encoded scalars or lists so round trips are exact.
"""

from __future__ import annotations

import configparser
import io
import json
import os
from dataclasses import dataclass, field, fields, asdict

from .dsp import DspConfig
from .corpus import SyntheticSpec
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class RunSettings:
    split_ratio: float = 0.8
    split_seed: int = 0
    eval_seed: int = 0
    max_eval_tasks: int = 60
    griffin_lim_iters: int = 60

    def to_json(self):
        return asdict(self)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dsp: DspConfig = field(default_factory=DspConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    run: RunSettings = field(default_factory=RunSettings)

    _SECTIONS = ("model", "train", "dsp", "synthetic", "run")

    def section(self, name):
        if name not in self._SECTIONS:
            raise ValueError(f"unknown config section '{name}'")
        return getattr(self, name)


def desk_profile():
    """Desk-scale defaults: small enough to train on one CPU core in minutes."""
    cfg = RunConfig()
    cfg.model = ModelConfig(
        hidden=64, encoder_blocks=2, decoder_blocks=2, heads=4, n_mels=80,
        phoneme_inventory=12, n_speakers=3, dropout=0.1,
        prosody_conv_channels=128, prosody_blocks=2)
    cfg.train = TrainConfig(
        batch_size=8, total_steps=5000, warmup_steps=1000, lambda_a_ramp_steps=1000,
        log_every=10)
    return cfg


def paper_profile():
    """The published configuration; expressible but not runnable at desk scale."""
    return RunConfig()


def profile(name):
    if name == "desk":
        return desk_profile()
    if name == "paper":
        return paper_profile()
    raise ValueError(f"unknown profile '{name}' (expected desk or paper)")


def _encode(value):
    return json.dumps(value)


def _decode(text):
    return json.loads(text)


def to_ini(cfg: RunConfig):
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for sec in RunConfig._SECTIONS:
        obj = getattr(cfg, sec)
        parser[sec] = {f.name: _encode(getattr(obj, f.name)) for f in fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def save_config(path, cfg: RunConfig):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(to_ini(cfg))


def apply_kv(cfg: RunConfig, dotted_key, raw_value):
    """Apply one `section.key=value` override; value parses as JSON, falling
    back to a bare string."""
    if "." not in dotted_key:
        raise ValueError(f"override '{dotted_key}' must look like section.key")
    sec_name, key = dotted_key.split(".", 1)
    obj = cfg.section(sec_name)
    valid = {f.name for f in fields(obj)}
    if key not in valid:
        raise ValueError(f"unknown key '{key}' in section [{sec_name}]")
    try:
        value = _decode(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    setattr(obj, key, value)
    # re-run dataclass validation
    obj.__class__(**{f.name: getattr(obj, f.name) for f in fields(obj)})
    return cfg


def load_config(path, base: RunConfig = None):
    cfg = base or desk_profile()
    parser = configparser.ConfigParser()
    parser.optionxform = str
    read = parser.read(path)
    if not read:
        raise ValueError(f"config file {path} not found or unreadable")
    for sec_name in parser.sections():
        if sec_name not in RunConfig._SECTIONS:
            raise ValueError(f"{path}: unknown section [{sec_name}]")
        obj = cfg.section(sec_name)
        valid = {f.name for f in fields(obj)}
        for key, raw in parser[sec_name].items():
            if key not in valid:
                raise ValueError(f"{path}: unknown key '{key}' in section [{sec_name}]")
            setattr(obj, key, _decode(raw))
        obj.__class__(**{f.name: getattr(obj, f.name) for f in fields(obj)})
    return cfg
