"""Command-line pipeline: generate, ingest, pretrain, finetune, evaluate,
forecast, attribute, inspect-checkpoint.

Every subcommand is deterministic given (config, seed). Derived artifacts
(splits, lab-bin edges, vocabulary) are recomputed from the cohort file by
pure functions, so downstream commands agree without extra state files.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, read_metadata, save_checkpoint
from .config import RunConfig, echo_config, parse_config
from .data import (apply_lab_binning, compute_lab_bin_edges, derive_labels, generate_cohort,
                   ingest_fhir_lines, split_cohort, write_fhir_lines)
from .errors import DataError, DivergenceError, UsageError
from .evalmetrics import (compute_metrics, forecasting_eval, format_report,
                          integrated_gradients, write_metrics_csv)
from .model import forward, init_model, make_batch, prediction_head
from .sequence import TaskKind, TokenType, build_vocabulary, encode_patient, save_vocabulary
from .training import expand_task_examples, finetune_mpf, pretrain, write_loss_log


def _config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(echo_config(cfg).encode()).hexdigest()[:16]


def _meta_line(cfg: RunConfig) -> str:
    return f"# ehrseq {__version__} config_hash={_config_hash(cfg)}\n"


def _write_atomic(path, content: str):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(content)
    os.replace(tmp, path)


def _load_cohort(path):
    with open(path, encoding="utf-8") as f:
        records, skipped = ingest_fhir_lines(f)
    if skipped:
        print(f"skipped {skipped} lines with unknown resourceType", file=sys.stderr)
    if not records:
        raise DataError(f"no patients in {path}")
    return records


def _prepare(cfg: RunConfig, records):
    """Split, compute bin edges on the pretraining split, bin, build vocab."""
    split = split_cohort(records, seed=cfg.split_seed)
    pre = [r for r in records if r.patient_id in split.pretrain]
    edges = compute_lab_bin_edges(pre)
    binned = [apply_lab_binning(r, edges) for r in records]
    concepts = {}
    for rec in binned:
        for visit in rec.visits:
            for ev in visit.events:
                concepts[ev.concept] = ev.type
    vocab = build_vocabulary(sorted(concepts.items()))
    return split, edges, binned, vocab


def _encode_split(cfg, binned, vocab, member_ids):
    seqs = []
    for rec in binned:
        if rec.patient_id in member_ids:
            seq = encode_patient(rec, vocab, cfg.l_c)
            seq.visit_order = np.minimum(seq.visit_order, cfg.v_max)
            seqs.append(seq)
    return seqs


def _clamp_orders(seqs, v_max):
    for s in seqs:
        s.visit_order = np.minimum(s.visit_order, v_max)
    return seqs


def cmd_generate(cfg: RunConfig, args):
    cohort = generate_cohort(cfg.generator_config())
    write_fhir_lines(cohort, args.out)
    print(f"wrote {len(cohort)} patients to {args.out}")
    return 0


def cmd_ingest(cfg: RunConfig, args):
    records = _load_cohort(args.input)
    write_fhir_lines(records, args.out)
    n_visits = sum(len(r.visits) for r in records)
    print(f"ingested {len(records)} patients, {n_visits} visits -> {args.out}")
    return 0


def cmd_pretrain(cfg: RunConfig, args):
    records = _load_cohort(args.cohort)
    split, edges, binned, vocab = _prepare(cfg, records)
    seqs = _encode_split(cfg, binned, vocab, split.pretrain)
    model = init_model(cfg.model_config(vocab.size))
    tcfg = cfg.train_config()
    log = pretrain(model, seqs, tcfg, mask_id=vocab.special_ids["[MASK]"])
    os.makedirs(args.out_dir, exist_ok=True)
    save_checkpoint(model, os.path.join(args.out_dir, "pretrained.ckpt"),
                    {"config_hash": _config_hash(cfg), "version": __version__,
                     "phase": "pretrain"})
    save_vocabulary(vocab, os.path.join(args.out_dir, "vocab.tsv"))
    write_loss_log(log, os.path.join(args.out_dir, "pretrain_loss.csv"))
    print(f"final loss {log[-1].loss:.4f} accuracy {log[-1].accuracy:.4f}")
    return 0


def cmd_finetune(cfg: RunConfig, args):
    records = _load_cohort(args.cohort)
    split, edges, binned, vocab = _prepare(cfg, records)
    model = load_checkpoint(args.checkpoint, cfg.model_config(vocab.size))
    fin = records_in(split.finetune, records)
    examples = expand_task_examples(fin, vocab, cfg.l_c, list(TaskKind), edges)
    for ex in examples:
        ex.sequence.visit_order = np.minimum(ex.sequence.visit_order, cfg.v_max)
    log = finetune_mpf(model, examples, cfg.train_config(finetune=True))
    os.makedirs(args.out_dir, exist_ok=True)
    save_checkpoint(model, os.path.join(args.out_dir, "finetuned.ckpt"),
                    {"config_hash": _config_hash(cfg), "version": __version__,
                     "phase": "finetune"})
    write_loss_log(log, os.path.join(args.out_dir, "finetune_loss.csv"))
    print(f"final loss {log[-1].loss:.4f} accuracy {log[-1].accuracy:.4f}")
    return 0


def records_in(member_ids, records):
    return [r for r in records if r.patient_id in member_ids]


def cmd_evaluate(cfg: RunConfig, args):
    records = _load_cohort(args.cohort)
    split, edges, binned, vocab = _prepare(cfg, records)
    model = load_checkpoint(args.checkpoint, cfg.model_config(vocab.size))
    test = records_in(split.test, records)
    rows = []
    for task in TaskKind:
        examples = expand_task_examples(test, vocab, cfg.l_c, [task], edges)
        if not examples:
            continue
        labels = np.array([e.label for e in examples])
        if labels.min() == labels.max():
            print(f"{task.name}: single-class test labels, skipped", file=sys.stderr)
            continue
        for ex in examples:
            ex.sequence.visit_order = np.minimum(ex.sequence.visit_order, cfg.v_max)
        scores = []
        for i in range(0, len(examples), cfg.batch_size):
            chunk = examples[i : i + cfg.batch_size]
            batch = make_batch([e.sequence for e in chunk])
            h = forward(model, batch)
            scores.extend(prediction_head(model, h, batch.true_lengths).data.tolist())
        rows.append((task.name, compute_metrics(np.array(scores), labels)))
    if not rows:
        raise DataError("no evaluable task on the test split")
    write_metrics_csv(rows, args.out)
    with open(args.out, encoding="utf-8") as f:
        body = f.read()
    _write_atomic(args.out, _meta_line(cfg) + body)
    print(format_report(rows))
    return 0


def cmd_forecast(cfg: RunConfig, args):
    records = _load_cohort(args.cohort)
    split, edges, binned, vocab = _prepare(cfg, records)
    model = load_checkpoint(args.checkpoint, cfg.model_config(vocab.size))
    seqs = _encode_split(cfg, binned, vocab, split.test)
    report = forecasting_eval(model, seqs, model.tables.concept.data,
                              cutoff=cfg.forecast_cutoff, type_of=vocab.type_of)
    lines = [_meta_line(cfg), "horizon,accuracy,cosine\n"]
    for h in report.horizons:
        lines.append(f"{h},{report.accuracy[h]:.10f},{report.cosine[h]:.10f}\n")
    _write_atomic(args.out, "".join(lines))
    print(f"evaluated {report.n_evaluated} sequences ({report.n_skipped} too short)")
    for h in report.horizons:
        print(f"horizon {h}: accuracy {report.accuracy[h]:.4f} "
              f"cosine {report.cosine[h]:.4f}")
    return 0


def cmd_attribute(cfg: RunConfig, args):
    records = _load_cohort(args.cohort)
    split, edges, binned, vocab = _prepare(cfg, records)
    model = load_checkpoint(args.checkpoint, cfg.model_config(vocab.size))
    task = TaskKind[args.task]
    test = records_in(split.test, records)
    examples = expand_task_examples(test, vocab, cfg.l_c, [task], edges)
    if not examples:
        raise DataError(f"no labeled {task.name} examples on the test split")
    examples = examples[: cfg.attribution_limit]
    sums = {}
    counts = {}
    residuals = []
    for ex in examples:
        ex.sequence.visit_order = np.minimum(ex.sequence.visit_order, cfg.v_max)
        report = integrated_gradients(model, ex.sequence, m=cfg.attribution_steps)
        residuals.append(report.completeness_residual)
        for i, t in enumerate(report.token_types):
            key = TokenType(t)
            sums[key] = sums.get(key, 0.0) + float(report.scores[i])
            counts[key] = counts.get(key, 0) + 1
    lines = [_meta_line(cfg), "token_type,mean_attribution,n_positions\n"]
    for key in sorted(sums, key=int):
        lines.append(f"{key.name},{sums[key] / counts[key]:.10f},{counts[key]}\n")
    _write_atomic(args.out, "".join(lines))
    print(f"{task.name}: {len(examples)} sequences, "
          f"mean completeness residual {np.mean(residuals):.2e}")
    for key in sorted(sums, key=int):
        print(f"  {key.name}: {sums[key] / counts[key]:+.5f}")
    return 0


def cmd_inspect(cfg: RunConfig, args):
    meta = read_metadata(args.checkpoint)
    for k, v in sorted(meta.items()):
        print(f"{k}={v}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ehrseq", description=__doc__)
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable; wins over the file)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic cohort")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    i = sub.add_parser("ingest", help="validate and normalize a cohort file")
    i.add_argument("--in", dest="input", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(fn=cmd_ingest)

    pre = sub.add_parser("pretrain", help="next-token pretraining")
    pre.add_argument("--cohort", required=True)
    pre.add_argument("--out-dir", required=True)
    pre.set_defaults(fn=cmd_pretrain)

    fin = sub.add_parser("finetune", help="multitask prompted finetuning")
    fin.add_argument("--cohort", required=True)
    fin.add_argument("--checkpoint", required=True)
    fin.add_argument("--out-dir", required=True)
    fin.set_defaults(fn=cmd_finetune)

    ev = sub.add_parser("evaluate", help="clinical metrics on the test split")
    ev.add_argument("--cohort", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--out", required=True)
    ev.set_defaults(fn=cmd_evaluate)

    fo = sub.add_parser("forecast", help="held-out token forecasting evaluation")
    fo.add_argument("--cohort", required=True)
    fo.add_argument("--checkpoint", required=True)
    fo.add_argument("--out", required=True)
    fo.set_defaults(fn=cmd_forecast)

    at = sub.add_parser("attribute", help="integrated-gradients attribution")
    at.add_argument("--cohort", required=True)
    at.add_argument("--checkpoint", required=True)
    at.add_argument("--task", default="MOR", choices=[t.name for t in TaskKind])
    at.add_argument("--out", required=True)
    at.set_defaults(fn=cmd_attribute)

    ins = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata")
    ins.add_argument("checkpoint")
    ins.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        cfg = parse_config(args.config, args.set)
        return args.fn(cfg, args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
