"""Command-line entry points: gen, train, eval, gradcheck, sweep, report.

Exit codes: 0 success, 1 validation/config/data failure, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys

from .autodiff import ConfigError, NumericError, gradcheck
from .config import RunConfig, load_config
from .data import (ParseError, ValidationError, assign_modality_regime,
                   load_corpus, serialize_corpus)
from .evaluate import evaluate, report_bytes, save_report
from .model import forward, init_params
from .sweep import AXES, save_sweep_csv, sweep
from .trainer import load_checkpoint, save_checkpoint, save_step_log, train
from . import synth


def _cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
        cfg.gen = dataclasses.replace(cfg.gen, seed=args.seed)
    cfg.validate()
    return cfg


def cmd_gen(args) -> int:
    cfg = _cfg(args)
    corpus = synth.generate(cfg.gen)
    corpus = assign_modality_regime(corpus, cfg.regime_fractions, cfg.seed)
    out = args.out or cfg.corpus_path
    if not out:
        raise ConfigError("gen needs --out or corpus_path in the config")
    serialize_corpus(corpus, out)
    counts = {r: sum(1 for d in corpus.documents if d.modality_mask == r)
              for r in ("full", "no_text", "no_video")}
    print(f"wrote {len(corpus.documents)} documents to {out} {counts}")
    return 0


def cmd_train(args) -> int:
    cfg = _cfg(args)
    corpus_path = args.corpus or cfg.corpus_path
    if not corpus_path:
        raise ConfigError("train needs --corpus or corpus_path in the config")
    corpus = load_corpus(corpus_path)
    result = train(cfg, corpus)
    out = args.out or cfg.checkpoint_path
    if not out:
        raise ConfigError("train needs --out or checkpoint_path in the config")
    save_checkpoint(out, result.params, cfg, result.step, result.rng_state)
    if args.log:
        save_step_log(args.log, result.log)
    last = result.log[-1].total if result.log else float("nan")
    print(f"trained {result.step} steps; final loss {last:.6f}; checkpoint {out}")
    return 0


def cmd_eval(args) -> int:
    params, cfg, _step, _rng = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = load_config(args.config)
        cfg.validate()
    corpus_path = args.corpus or cfg.corpus_path
    if not corpus_path:
        raise ConfigError("eval needs --corpus or corpus_path in the config")
    corpus = load_corpus(corpus_path)
    report = evaluate(params, cfg, corpus)
    out = args.out or cfg.report_path
    if out:
        save_report(out, report)
        print(f"report written to {out}")
    else:
        sys.stdout.write(report_bytes(report).decode("utf-8") + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _cfg(args)
    gen = dataclasses.replace(cfg.gen, docs=1, tokens_per_doc=(12, 16),
                              frames_per_doc=(2, 2))
    doc = synth.generate(gen).documents[0]
    params = init_params(cfg.model, cfg.seed)
    report = gradcheck(lambda: forward(doc, params, cfg.model, cfg.loss).loss,
                       params, samples=args.samples, eps=args.eps, seed=cfg.seed)
    worst = report.worst()
    print(f"gradcheck: {len(report.entries)} samples, max rel err "
          f"{report.max_rel_err:.3e} (worst {worst.name}[{worst.index}])")
    if not report.ok(args.tol):
        print(f"FAIL: exceeds tolerance {args.tol:.1e}")
        return 2
    print(f"OK: within tolerance {args.tol:.1e}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _cfg(args)
    if args.corpus or cfg.corpus_path:
        corpus = load_corpus(args.corpus or cfg.corpus_path)
    else:
        corpus = synth.generate(cfg.gen)
    values: list = []
    for tok in args.values.split(","):
        tok = tok.strip()
        if args.axis == "prompt_len":
            values.append(int(tok))
        elif args.axis == "missing_ratio":
            values.append(float(tok))
        else:
            values.append(tok)
    rows = sweep(cfg, corpus, args.axis, values)
    if not args.out:
        raise ConfigError("sweep needs --out for the CSV table")
    save_sweep_csv(args.out, rows)
    print(f"swept {args.axis} over {values}; table written to {args.out}")
    return 0


def _fmt_section(name: str, sec: dict) -> list[str]:
    lines = [f"[{name}] documents: {sec['n_documents']}"]
    for task in ("ent", "cha", "rel", "gro"):
        s = sec[task]
        lines.append(f"  {task:4s} P {s['precision']:.4f}  R {s['recall']:.4f}  "
                     f"F1 {s['f1']:.4f}")
    lines.append(f"  avg F1 {sec['avg']:.4f}")
    counts = sec["errors"]["counts"]
    rates = sec["errors"]["rates"]
    lines.append("  errors: " + ", ".join(
        f"{k}={counts[k]}" for k in
        ("ent_boundary", "ent_type", "cha_wrong_members", "cha_missing_members",
         "rel_false", "rel_type", "gro_boundary", "gro_type")))
    lines.append("  error rates: " + ", ".join(f"{k}={v:.3f}" for k, v in rates.items()))
    return lines


def cmd_report(args) -> int:
    with open(args.report, "r", encoding="utf-8") as f:
        rep = json.load(f)
    lines = _fmt_section("overall", rep)
    for regime, sec in rep.get("regimes", {}).items():
        if sec["n_documents"]:
            lines.extend(_fmt_section(regime, sec))
    print("\n".join(lines))
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f)
            w.writerow(["section", "task", "precision", "recall", "f1"])
            sections = [("overall", rep)] + list(rep.get("regimes", {}).items())
            for name, sec in sections:
                for task in ("ent", "cha", "rel", "gro"):
                    s = sec[task]
                    w.writerow([name, task, s["precision"], s["recall"], s["f1"]])
                w.writerow([name, "avg", "", "", sec["avg"]])
        print(f"plot data written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="himie",
                                description="hierarchical multimodal information extraction")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, corpus=False):
        sp.add_argument("--config", help="path to a JSON run-config file")
        sp.add_argument("--seed", type=int, help="override config seed")
        sp.add_argument("--out", help="output path")
        if corpus:
            sp.add_argument("--corpus", help="corpus JSONL path (overrides config)")

    sp = sub.add_parser("gen", help="synthesize a corpus")
    common(sp)
    sp.set_defaults(fn=cmd_gen)

    sp = sub.add_parser("train", help="train a model")
    common(sp, corpus=True)
    sp.add_argument("--log", help="write per-step loss log (JSONL)")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp, corpus=True)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient check")
    common(sp)
    sp.add_argument("--samples", type=int, default=200)
    sp.add_argument("--eps", type=float, default=1e-4)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("sweep", help="train/evaluate across one axis")
    common(sp, corpus=True)
    sp.add_argument("--axis", required=True, choices=AXES)
    sp.add_argument("--values", required=True,
                    help="comma-separated values, e.g. 2,4,8,16,32")
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("report", help="render a report JSON")
    sp.add_argument("--report", required=True, help="path to report JSON")
    sp.add_argument("--out", help="write plot-data CSV here")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValidationError, ParseError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
