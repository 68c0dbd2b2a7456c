"""Batch command-line surface: corpus generation, feature extraction,
training, synthesis and transfer, anchor construction, evaluation, and the
gradient oracle.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric
failure (NaN or divergence).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import corpus, dsp, evaluation, runconfig
from . import model as model_mod
from . import training as training_mod
from .sections import ContainerError
from .training import NumericError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _resolve_out(path):
    root = os.environ.get("FILMTTS_RUNS")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _load_cfg(args):
    cfg = runconfig.profile(args.profile)
    if args.config:
        cfg = runconfig.load_config(args.config, cfg)
    for kv in args.set or []:
        if "=" not in kv:
            raise ValueError(f"--set expects section.key=value, got '{kv}'")
        key, value = kv.split("=", 1)
        runconfig.apply_kv(cfg, key.strip(), value.strip())
    return cfg


def _add_common(p):
    p.add_argument("--config", help="INI config file; flags override it")
    p.add_argument("--profile", default="desk", choices=("desk", "paper"),
                   help="baseline profile the config/overrides start from")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a single config value (repeatable)")


def _load_corpus_dir(path):
    records, table, stats, spec = corpus.load_corpus(path)
    by_id = {r.utterance_id: r for r in records}
    return records, table, stats, spec, by_id


def _load_model(path):
    model, cfg, meta = model_mod.load_checkpoint(path)
    model.eval()
    return model, cfg, meta


def _write_outputs(out_dir, name, mel, cfg, want_wav):
    os.makedirs(out_dir, exist_ok=True)
    np.save(os.path.join(out_dir, f"{name}.npy"), mel.astype(np.float32))
    if want_wav:
        audio = dsp.griffin_lim(mel, cfg.dsp, n_iter=cfg.run.griffin_lim_iters)
        dsp.write_wav(os.path.join(out_dir, f"{name}.wav"), audio, cfg.dsp.sample_rate)


def cmd_gen_corpus(args):
    cfg = _load_cfg(args)
    out = _resolve_out(args.out)
    records, table, stats = corpus.generate_synthetic_corpus(cfg.synthetic)
    corpus.save_corpus(out, records, table, stats, cfg.synthetic)
    runconfig.save_config(os.path.join(out, "config.ini"), cfg)
    print(f"wrote {len(records)} records to {out}")
    return 0


def cmd_extract(args):
    cfg = _load_cfg(args)
    stats = None
    label_map = None
    if args.corpus:
        _, _, stats, _, _ = _load_corpus_dir(args.corpus)
    if args.labels:
        with open(args.labels, encoding="utf-8") as fh:
            label_map = {line.split()[0]: int(line.split()[1]) for line in fh if line.strip()}
    rec = corpus.ingest_real(args.wav, args.alignment, args.speaker, cfg.dsp,
                             stats=stats, label_map=label_map)
    out = _resolve_out(args.out)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    corpus.save_record(out, rec)
    print(f"wrote {out} ({rec.n_phonemes} phonemes, {rec.n_frames} frames)")
    return 0


def cmd_train(args):
    cfg = _load_cfg(args)
    records, table, stats, _, _ = _load_corpus_dir(args.corpus)
    max_id = max(int(r.phoneme_ids.max()) for r in records)
    cfg.model.phoneme_inventory = max(cfg.model.phoneme_inventory, max_id + 1)
    cfg.model.n_speakers = len(table)
    out = _resolve_out(args.out)
    os.makedirs(out, exist_ok=True)
    runconfig.save_config(os.path.join(out, "config.ini"), cfg)
    train_recs, _ = corpus.split_corpus(records, cfg.run.split_ratio, cfg.run.split_seed)
    model, classifier, history = training_mod.train_model(
        train_recs, stats, cfg.model, cfg.train,
        metrics_path=os.path.join(out, "metrics.csv"),
        checkpoint_path=os.path.join(out, "checkpoint.dftx"))
    final = history[-1]
    print(f"trained {len(history)} steps; final l_e {final['l_e']:.4f} "
          f"(mel mse {final['mel_mse']:.4f})")
    return 0


def _reference_tuple(record, stats):
    from .prosody import reference_inputs
    return reference_inputs(record, stats)


def cmd_synth(args):
    cfg = _load_cfg(args)
    model, _, _ = _load_model(args.checkpoint)
    _, _, stats, _, by_id = _load_corpus_dir(args.corpus)
    rec = by_id.get(args.record)
    if rec is None:
        raise ValueError(f"record '{args.record}' not found in corpus")
    mel_ref, p_ref, e_ref = _reference_tuple(rec, stats)
    mel, _ = model.infer(rec.phoneme_ids, mel_ref, p_ref, e_ref, rec.speaker_id)
    _write_outputs(_resolve_out(args.out), rec.utterance_id, mel, cfg, args.wav)
    print(f"synthesized {rec.utterance_id}: {mel.shape[0]} frames")
    return 0


def _parse_text_arg(args, by_id):
    if args.text:
        donor = by_id.get(args.text)
        if donor is None:
            raise ValueError(f"text record '{args.text}' not found in corpus")
        return donor.phoneme_ids, donor.utterance_id
    ids = np.array([int(tok) for tok in args.phonemes.split(",")], dtype=np.int64)
    return ids, "phonemes"


def cmd_transfer(args):
    cfg = _load_cfg(args)
    model, mcfg, _ = _load_model(args.checkpoint)
    _, table, stats, _, by_id = _load_corpus_dir(args.corpus)
    ref = by_id.get(args.reference)
    if ref is None:
        raise ValueError(f"reference record '{args.reference}' not found in corpus")
    if not 0 <= args.target_speaker < mcfg.n_speakers:
        raise ValueError(f"target speaker {args.target_speaker} outside [0, {mcfg.n_speakers})")
    ids, text_id = _parse_text_arg(args, by_id)
    mel_ref, p_ref, e_ref = _reference_tuple(ref, stats)
    mel, info = model.infer(ids, mel_ref, p_ref, e_ref, args.target_speaker)
    name = f"{ref.utterance_id}__to__spk{args.target_speaker}__{text_id}"
    _write_outputs(_resolve_out(args.out), name, mel, cfg, args.wav)
    print(f"transferred prosody of {ref.utterance_id} onto '{text_id}' "
          f"as speaker {args.target_speaker}: {mel.shape[0]} frames")
    return 0


def cmd_anchor(args):
    cfg = _load_cfg(args)
    model, _, _ = _load_model(args.checkpoint)
    _, _, stats, _, by_id = _load_corpus_dir(args.corpus)
    rec = by_id.get(args.record)
    if rec is None:
        raise ValueError(f"record '{args.record}' not found in corpus")
    ref = by_id.get(args.reference) if args.reference else rec
    if ref is None:
        raise ValueError(f"reference record '{args.reference}' not found in corpus")
    overrides = evaluation.make_low_anchor(rec, args.seed)
    mel_ref, p_ref, e_ref = _reference_tuple(ref, stats)
    mel, _ = model.infer(rec.phoneme_ids, mel_ref, p_ref, e_ref, rec.speaker_id, overrides)
    _write_outputs(_resolve_out(args.out), f"{rec.utterance_id}__anchor{args.seed}", mel, cfg, args.wav)
    print(f"anchor for {rec.utterance_id} (seed {args.seed}): {mel.shape[0]} frames")
    return 0


def _eval_tasks(cfg, records, table, args):
    _, test = corpus.split_corpus(records, cfg.run.split_ratio, cfg.run.split_seed)
    refs = [r for r in test if r.style_id != 0] or test
    return evaluation.build_transfer_tasks(
        refs, records, len(table), cfg.run.eval_seed, max_tasks=cfg.run.max_eval_tasks)


def cmd_eval_pcc(args):
    cfg = _load_cfg(args)
    model, _, _ = _load_model(args.checkpoint)
    records, table, stats, _, by_id = _load_corpus_dir(args.corpus)
    tasks = _eval_tasks(cfg, records, table, args)
    report = evaluation.evaluate_pcc(model, tasks, by_id, stats)
    out = _resolve_out(args.out)
    os.makedirs(out, exist_ok=True)
    evaluation.write_report(os.path.join(out, "pcc_report.json"), report)
    runconfig.save_config(os.path.join(out, "config.ini"), cfg)
    print(f"mean F0 PCC {report['mean_r']:.4f} over {report['n']} tasks "
          f"(shuffled baseline {report.get('shuffled_mean_r', float('nan')):.4f})")
    return 0


def cmd_eval_speaker(args):
    cfg = _load_cfg(args)
    model, mcfg, _ = _load_model(args.checkpoint)
    records, table, stats, _, by_id = _load_corpus_dir(args.corpus)
    train_recs, test_recs = corpus.split_corpus(records, cfg.run.split_ratio, cfg.run.split_seed)
    clf, gt_acc = evaluation.train_eval_speaker_classifier(
        train_recs, test_recs, len(table), mcfg.n_mels, seed=cfg.run.eval_seed)
    tasks = _eval_tasks(cfg, records, table, args)
    report = evaluation.eval_speaker_accuracy(model, tasks, by_id, stats, clf)
    report["ground_truth_accuracy"] = gt_acc
    out = _resolve_out(args.out)
    os.makedirs(out, exist_ok=True)
    evaluation.write_report(os.path.join(out, "speaker_report.json"), report)
    runconfig.save_config(os.path.join(out, "config.ini"), cfg)
    print(f"target-speaker accuracy {report['accuracy']:.3f} over {report['n']} tasks "
          f"(ground-truth classifier {gt_acc:.3f})")
    return 0


def cmd_grad_check(args):
    from . import checks
    worst_full = checks.full_loss_gradcheck(seed=args.seed, epsilon=args.epsilon)
    worst_prim = checks.primitive_gradchecks(n_seeds=args.primitive_seeds, epsilon=args.epsilon)
    worst = max(worst_full, worst_prim)
    print(f"primitive max rel error: {worst_prim:.3g}")
    print(f"full-loss max rel error: {worst_full:.3g}")
    print(f"max rel error: {worst:.3g}")
    if worst > 1e-5:
        print("FAIL: exceeds 1e-5")
        return 3
    print("PASS")
    return 0


def build_parser():
    p = _Parser(prog="filmtts", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-corpus", help="generate the deterministic synthetic corpus")
    _add_common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gen_corpus)

    sp = sub.add_parser("extract", help="ingest a WAV + alignment TSV into a record file")
    _add_common(sp)
    sp.add_argument("--wav", required=True)
    sp.add_argument("--alignment", required=True)
    sp.add_argument("--speaker", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--corpus", help="corpus dir supplying speaker stats")
    sp.add_argument("--labels", help="file of `label id` pairs mapping phoneme labels")
    sp.set_defaults(fn=cmd_extract)

    sp = sub.add_parser("train", help="train on a corpus directory")
    _add_common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("synth", help="reconstruct a record (itself as reference)")
    _add_common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--record", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--wav", action="store_true", help="also write Griffin-Lim audio")
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("transfer", help="inter-text cross-speaker prosody transfer")
    _add_common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--reference", required=True, help="reference record id")
    group = sp.add_mutually_exclusive_group(required=True)
    group.add_argument("--text", help="record id donating the phoneme sequence")
    group.add_argument("--phonemes", help="comma-separated phoneme ids")
    sp.add_argument("--target-speaker", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--wav", action="store_true")
    sp.set_defaults(fn=cmd_transfer)

    sp = sub.add_parser("anchor", help="MUSHRA-style low anchor synthesis")
    _add_common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--record", required=True)
    sp.add_argument("--reference", help="neutral reference id (defaults to the record)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--wav", action="store_true")
    sp.set_defaults(fn=cmd_anchor)

    sp = sub.add_parser("eval-pcc", help="pitch-contour correlation over transfer tasks")
    _add_common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_eval_pcc)

    sp = sub.add_parser("eval-speaker", help="target-speaker classification accuracy")
    _add_common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_eval_speaker)

    sp = sub.add_parser("grad-check", help="finite-difference gradient oracle")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--epsilon", type=float, default=1e-5)
    sp.add_argument("--primitive-seeds", type=int, default=5)
    sp.set_defaults(fn=cmd_grad_check)

    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        return args.fn(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ContainerError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
