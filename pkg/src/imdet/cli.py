"""Command-line surface: generate / train / eval / baseline / ensemble /
export-features.

Exit codes: 0 success, 2 usage or configuration problems, 3 external
service failures, 4 numeric failures.  All randomness flows from --seed;
subsystems derive fixed sub-streams from it.  Config precedence:
flag > config file > built-in default, and the hash of the resolved
configuration is recorded in every artifact a command writes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .config import config_hash, load_config_file, merge_config
from .dataset import DatasetHandle, generate_dataset
from .errors import (ArgumentError, ConfigurationError, FormatError,
                     GenerationError, ImdetError, NumericError, ProtocolError,
                     TransportError)
from .evaluation import (EvalReport, OracleScorer, RandomScorer,
                         baseline_detect, evaluate, evaluate_detections,
                         export_features)
from .imagination import LmClientConfig
from .model import load_checkpoint
from .plots import ap_bar_chart, loss_curves
from .proposals import (SelectiveSearchParams, ensure_proposals,
                        grid_proposals)
from .synthesis import ProceduralSpec, SynthClient, default_shape_classes
from .training import (TrainConfig, select_ensemble_classes, train_isod,
                       train_ssod, train_wsod_mixed)
from .vocab import ClassVocab, default_vocab

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SERVICE = 3
EXIT_NUMERIC = 4

ENDPOINT_ENV = "IMDET_GEN_ENDPOINT"


def _vocab_from(names: str | None) -> ClassVocab:
    if not names:
        return default_vocab()
    return ClassVocab.from_list([s.strip() for s in names.split(",") if s.strip()])


def _ids_from(text: str | None):
    if not text:
        return None
    try:
        return {int(tok) for tok in text.split(",") if tok.strip()}
    except ValueError:
        raise ConfigurationError(f"class id list must be integers, got {text!r}")


def _flag_overrides(args, keys) -> dict:
    return {k: getattr(args, k) for k in keys}


def _resolve(args, defaults: dict) -> dict:
    file_cfg = load_config_file(args.config) if getattr(args, "config", None) else None
    cfg = merge_config(defaults, file_cfg, _flag_overrides(args, defaults.keys()))
    if "workers" in cfg and cfg["workers"] is None:
        cfg["workers"] = os.cpu_count() or 1
    return cfg


def _hashable(cfg: dict) -> dict:
    # Worker count never changes output bytes, so it stays out of the
    # recorded config (N=1 and N=k runs must produce identical artifacts).
    return {k: v for k, v in cfg.items() if k != "workers"}


def _load_annotated(handle: DatasetHandle):
    return [handle.load_sample(i, with_boxes=True) for i in range(len(handle))]


def _proposals_for(handle: DatasetHandle, samples, method: str,
                   max_proposals: int, workers: int):
    if max_proposals < 1:
        raise ConfigurationError("max-proposals must be >= 1")
    if method == "grid":
        return [list(grid_proposals(s.width, s.height).boxes)[:max_proposals]
                for s in samples]
    params = SelectiveSearchParams(max_proposals=max_proposals)

    def one(i):
        return list(ensure_proposals(handle.root, i, samples[i].pixels,
                                     params).boxes)[:max_proposals]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, range(len(samples))))
    return [one(i) for i in range(len(samples))]


def _write_report(report: EvalReport, out_path: str, cfg_hash: str,
                  figure: str | None, class_names=None) -> None:
    obj = json.loads(report.to_json())
    obj["config_hash"] = cfg_hash
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    fig_path = figure or os.path.splitext(out_path)[0] + ".png"
    ap_bar_chart(report, fig_path, class_names=class_names)
    print(f"report: {out_path}")
    print(f"figure: {fig_path}")


def _print_ap_table(report: EvalReport, vocab: ClassVocab | None) -> None:
    print("class_id\tname\tAP")
    for c, ap in sorted(report.per_class_ap.items()):
        name = vocab.name_of(c) if vocab and c < len(vocab) else "-"
        print(f"{c}\t{name}\t{ap:.4f}")
    for c in sorted(report.excluded_classes):
        name = vocab.name_of(c) if vocab and c < len(vocab) else "-"
        print(f"{c}\t{name}\texcluded (no ground truth)")
    print(f"mAP\t-\t{report.mean_ap:.4f}")


# --- generate ----------------------------------------------------------------

GEN_DEFAULTS = {
    "n": 100, "seed": 0, "backend": "procedural", "endpoint": None,
    "lm": "mock", "max_tokens": 15, "width": 64, "height": 64,
    "provenance": "imaginary", "classes": None, "restrict": None, "workers": None,
}


def cmd_generate(args) -> int:
    cfg = _resolve(args, GEN_DEFAULTS)
    vocab = _vocab_from(cfg["classes"])
    endpoint = cfg["endpoint"] or os.environ.get(ENDPOINT_ENV)

    restrict_ids = _ids_from(cfg["restrict"])
    if cfg["backend"] == "procedural":
        mapping = default_shape_classes(vocab)
        if restrict_ids:
            unknown = restrict_ids - set(mapping)
            if unknown:
                raise ConfigurationError(
                    f"restricted ids {sorted(unknown)} are not in the vocabulary")
            # restricted runs must not paint other classes into the scenes
            mapping = {c: mapping[c] for c in restrict_ids}
        spec = ProceduralSpec(shape_classes=mapping)
        synth = SynthClient(procedural=spec)
    elif cfg["backend"] == "remote":
        if not endpoint:
            raise ConfigurationError(
                f"remote backend needs --endpoint or ${ENDPOINT_ENV}")
        synth = SynthClient(endpoint=endpoint)
    else:
        raise ConfigurationError(f"unknown backend {cfg['backend']!r}")

    if cfg["lm"] == "off":
        lm = None
    elif cfg["lm"] == "mock":
        lm = LmClientConfig(endpoint="mock:scene", max_tokens=cfg["max_tokens"])
    elif cfg["lm"] == "remote":
        if not endpoint:
            raise ConfigurationError(
                f"remote language model needs --endpoint or ${ENDPOINT_ENV}")
        lm = LmClientConfig(endpoint=endpoint, max_tokens=cfg["max_tokens"])
    else:
        raise ConfigurationError(f"unknown lm mode {cfg['lm']!r}")

    summary = generate_dataset(
        vocab, lm, synth, cfg["n"], cfg["seed"], args.out,
        width=cfg["width"], height=cfg["height"], provenance=cfg["provenance"],
        restrict_classes=restrict_ids, workers=cfg["workers"],
        log=lambda msg: print(msg, file=sys.stderr))

    resolved = _hashable(cfg)
    resolved["vocab"] = vocab.to_list()
    h = config_hash(resolved)
    with open(os.path.join(args.out, "genconfig.json"), "w", encoding="utf-8") as fh:
        json.dump({**resolved, "config_hash": h}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {summary['achieved']}/{summary['requested']} samples to {args.out}"
          f" (skipped {summary['skipped']}, backend {summary['backend']})")
    return EXIT_OK


# --- train --------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "mode": "isod", "steps": 200, "batch_size": 4, "lr": 1e-3,
    "momentum": 0.9, "weight_decay": 5e-4, "seed": 0, "hflip": True,
    "scale_jitter": True, "k_stages": 1, "ema_momentum": 0.999,
    "pgt_confidence_threshold": 0.7, "burn_in_steps": None,
    "max_proposals": 500, "d": 128, "channels": [16, 32, 64, 64],
    "classes": None,
}


def cmd_train(args) -> int:
    cfg = _resolve(args, TRAIN_DEFAULTS)
    vocab = _vocab_from(cfg.pop("classes"))
    channels = tuple(int(c) for c in cfg.pop("channels"))
    tc = TrainConfig(channels=channels, **cfg)

    def log(msg):
        print(msg, file=sys.stderr)

    if tc.mode == "isod":
        if not args.imaginary:
            raise ConfigurationError("isod training needs --imaginary")
        handle = DatasetHandle(args.imaginary, "imaginary")
        _model, history = train_isod(tc, handle, vocab, out_dir=args.out, log=log)
    elif tc.mode == "wsod_mixed":
        if not args.imaginary or not args.real_weak:
            raise ConfigurationError(
                "wsod_mixed training needs --imaginary and --real-weak")
        im = DatasetHandle(args.imaginary, "imaginary")
        rw = DatasetHandle(args.real_weak, "real_weak")
        _model, history = train_wsod_mixed(tc, im, rw, vocab,
                                           out_dir=args.out, log=log)
    else:  # ssod
        if not args.real_boxed:
            raise ConfigurationError("ssod training needs --real-boxed")
        boxed = DatasetHandle(args.real_boxed, "real_boxed")
        unl = DatasetHandle(args.real_unlabeled, "real_unlabeled") \
            if args.real_unlabeled else None
        im = DatasetHandle(args.imaginary, "imaginary") if args.imaginary else None
        _s, _t, history = train_ssod(tc, boxed, real_unlabeled=unl,
                                     imaginary=im, vocab=vocab,
                                     out_dir=args.out, log=log)

    loss_curves(history, os.path.join(args.out, "loss.png"))
    final = history.records[-1]
    print(f"trained {tc.mode} for {tc.steps} steps; final loss {final['loss']:.4f}")
    print(f"run directory: {args.out}")
    return EXIT_OK


# --- eval ----------------------------------------------------------------------

EVAL_DEFAULTS = {
    "role": "imaginary", "iou": 0.5, "min_score": 0.05, "nms": 0.3,
    "source": "refinement", "voc07_11point": False, "proposals": "selective",
    "max_proposals": 500, "workers": None,
}


def _checkpoint_guard(checkpoint_path: str, model, force: bool) -> None:
    """A checkpoint evaluated inside a run directory must match the config
    that directory records; --force overrides."""
    sibling = os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)),
                           "config.json")
    if not os.path.exists(sibling):
        return
    with open(sibling, "r", encoding="utf-8") as fh:
        recorded = json.load(fh).get("config_hash")
    if recorded and recorded != model.config_hash and not force:
        raise ConfigurationError(
            f"checkpoint hash {model.config_hash[:12]} does not match the run's "
            f"config.json hash {recorded[:12]}; pass --force to evaluate anyway")


def cmd_eval(args) -> int:
    cfg = _resolve(args, EVAL_DEFAULTS)
    model = load_checkpoint(args.checkpoint)
    _checkpoint_guard(args.checkpoint, model, args.force)
    model.check_finite()

    handle = DatasetHandle(args.data, cfg["role"])
    samples = _load_annotated(handle)
    props = _proposals_for(handle, samples, cfg["proposals"],
                           cfg["max_proposals"], cfg["workers"])
    report = evaluate(model, samples, props, iou_threshold=cfg["iou"],
                      min_score=cfg["min_score"], nms_threshold=cfg["nms"],
                      source=cfg["source"], eleven_point=cfg["voc07_11point"])

    resolved = _hashable(cfg)
    resolved["checkpoint_hash"] = model.config_hash
    h = config_hash(resolved)
    vocab = model.vocab
    _print_ap_table(report, vocab)
    _write_report(report, args.out, h, args.figure,
                  class_names={c: vocab.name_of(c) for c in range(len(vocab))})
    return EXIT_OK


# --- baseline -------------------------------------------------------------------

BASELINE_DEFAULTS = {
    "role": "imaginary", "scorer": "oracle", "iou": 0.5, "min_score": 0.05,
    "nms": 0.3, "proposals": "grid", "max_proposals": 1000, "seed": 0,
    "classes": None, "workers": None, "crop_side": 32,
}


def cmd_baseline(args) -> int:
    cfg = _resolve(args, BASELINE_DEFAULTS)
    vocab = _vocab_from(cfg["classes"])
    handle = DatasetHandle(args.data, cfg["role"])
    samples = _load_annotated(handle)
    props = _proposals_for(handle, samples, cfg["proposals"],
                           cfg["max_proposals"], cfg["workers"])

    if cfg["scorer"] == "oracle":
        scorer = OracleScorer(vocab)
    elif cfg["scorer"] == "random":
        scorer = RandomScorer(cfg["seed"])
    else:
        raise ConfigurationError(f"unknown scorer {cfg['scorer']!r}")

    dets = [baseline_detect(scorer, s, p, vocab,
                            max_proposals=cfg["max_proposals"],
                            min_score=cfg["min_score"],
                            nms_threshold=cfg["nms"],
                            crop_side=cfg["crop_side"],
                            log=lambda m: print(m, file=sys.stderr))
            for s, p in zip(samples, props)]
    report = evaluate_detections(dets, samples, len(vocab),
                                 iou_threshold=cfg["iou"])

    resolved = _hashable(cfg)
    resolved["vocab"] = vocab.to_list()
    h = config_hash(resolved)
    _print_ap_table(report, vocab)
    _write_report(report, args.out, h, args.figure,
                  class_names={c: vocab.name_of(c) for c in range(len(vocab))})
    return EXIT_OK


# --- ensemble --------------------------------------------------------------------

def cmd_ensemble(args) -> int:
    with open(args.report_with, "r", encoding="utf-8") as fh:
        rep_with = EvalReport.from_json(fh.read())
    with open(args.report_baseline, "r", encoding="utf-8") as fh:
        rep_base = EvalReport.from_json(fh.read())
    selected = select_ensemble_classes(rep_with.per_class_ap,
                                       rep_base.per_class_ap)
    if selected:
        print("selected classes (AP improved):")
        for c in sorted(selected):
            print(f"  {c}")
    else:
        print("no class improved; falling back to the full vocabulary",
              file=sys.stderr)

    if args.regenerate:
        if not args.out:
            raise ConfigurationError("--regenerate needs --out for the new dataset")
        args.restrict = ",".join(str(c) for c in sorted(selected)) if selected else None
        return cmd_generate(args)
    return EXIT_OK


# --- export-features ----------------------------------------------------------------

EXPORT_DEFAULTS = {
    "role": "imaginary", "n_per_class": 10, "proposals": "selective",
    "max_proposals": 500, "workers": None,
}


def cmd_export_features(args) -> int:
    cfg = _resolve(args, EXPORT_DEFAULTS)
    model = load_checkpoint(args.checkpoint)
    model.check_finite()
    handle = DatasetHandle(args.data, cfg["role"])
    samples = [handle.load_sample(i) for i in range(len(handle))]
    props = _proposals_for(handle, samples, cfg["proposals"],
                           cfg["max_proposals"], cfg["workers"])
    n = export_features(model, samples, props, args.out,
                        n_per_class=cfg["n_per_class"],
                        log=lambda m: print(m, file=sys.stderr))
    resolved = _hashable(cfg)
    resolved["checkpoint_hash"] = model.config_hash
    with open(args.out + ".config.json", "w", encoding="utf-8") as fh:
        json.dump({**resolved, "config_hash": config_hash(resolved)}, fh,
                  indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {n} feature rows to {args.out}")
    return EXIT_OK


# --- parser ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="JSON config file; flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="imdet",
        description="Weakly supervised detection trained on generated images")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a generated dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--backend", choices=["procedural", "remote"])
    g.add_argument("--endpoint", help=f"generator service URL (or ${ENDPOINT_ENV})")
    g.add_argument("--lm", choices=["off", "mock", "remote"])
    g.add_argument("--max-tokens", dest="max_tokens", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--provenance", choices=["imaginary", "real"])
    g.add_argument("--classes", help="comma-separated class names")
    g.add_argument("--restrict", help="comma-separated class ids to draw from")
    g.add_argument("--workers", type=int)
    _add_common(g)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--mode", choices=["isod", "wsod_mixed", "ssod"])
    t.add_argument("--imaginary", help="generated dataset directory")
    t.add_argument("--real-weak", dest="real_weak")
    t.add_argument("--real-boxed", dest="real_boxed")
    t.add_argument("--real-unlabeled", dest="real_unlabeled")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--no-hflip", dest="hflip", action="store_false", default=None)
    t.add_argument("--no-scale-jitter", dest="scale_jitter",
                   action="store_false", default=None)
    t.add_argument("--k-stages", dest="k_stages", type=int)
    t.add_argument("--ema-momentum", dest="ema_momentum", type=float)
    t.add_argument("--pgt-threshold", dest="pgt_confidence_threshold", type=float)
    t.add_argument("--burn-in", dest="burn_in_steps", type=int)
    t.add_argument("--max-proposals", dest="max_proposals", type=int)
    t.add_argument("--d", type=int)
    t.add_argument("--channels", type=lambda s: [int(c) for c in s.split(",")])
    t.add_argument("--classes", help="comma-separated class names")
    _add_common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on annotated data")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default="eval_report.json")
    e.add_argument("--figure", help="AP chart path (default: report stem + .png)")
    e.add_argument("--role", choices=["imaginary", "real_boxed"])
    e.add_argument("--iou", type=float)
    e.add_argument("--min-score", dest="min_score", type=float)
    e.add_argument("--nms", type=float)
    e.add_argument("--source", choices=["refinement", "mil"])
    e.add_argument("--voc07-11point", dest="voc07_11point",
                   action="store_true", default=None)
    e.add_argument("--proposals", choices=["selective", "grid"])
    e.add_argument("--max-proposals", dest="max_proposals", type=int)
    e.add_argument("--workers", type=int)
    e.add_argument("--force", action="store_true",
                   help="evaluate even if the run config hash mismatches")
    _add_common(e)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("baseline", help="proposal-scoring baseline harness")
    b.add_argument("--data", required=True)
    b.add_argument("--out", default="baseline_report.json")
    b.add_argument("--figure")
    b.add_argument("--role", choices=["imaginary", "real_boxed"])
    b.add_argument("--scorer", choices=["oracle", "random"])
    b.add_argument("--iou", type=float)
    b.add_argument("--min-score", dest="min_score", type=float)
    b.add_argument("--nms", type=float)
    b.add_argument("--proposals", choices=["selective", "grid"])
    b.add_argument("--max-proposals", dest="max_proposals", type=int)
    b.add_argument("--crop-side", dest="crop_side", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--classes", help="comma-separated class names")
    b.add_argument("--workers", type=int)
    _add_common(b)
    b.set_defaults(func=cmd_baseline)

    n = sub.add_parser("ensemble",
                       help="pick classes whose AP improved with generated data")
    n.add_argument("--report-with", dest="report_with", required=True)
    n.add_argument("--report-baseline", dest="report_baseline", required=True)
    n.add_argument("--regenerate", action="store_true",
                   help="write a dataset restricted to the selected classes")
    # regeneration reuses the generate flags
    n.add_argument("--out")
    n.add_argument("--n", type=int)
    n.add_argument("--seed", type=int)
    n.add_argument("--backend", choices=["procedural", "remote"])
    n.add_argument("--endpoint")
    n.add_argument("--lm", choices=["off", "mock", "remote"])
    n.add_argument("--max-tokens", dest="max_tokens", type=int)
    n.add_argument("--width", type=int)
    n.add_argument("--height", type=int)
    n.add_argument("--provenance", choices=["imaginary", "real"])
    n.add_argument("--classes")
    n.add_argument("--workers", type=int)
    _add_common(n)
    n.set_defaults(func=cmd_ensemble, restrict=None)

    x = sub.add_parser("export-features", help="CSV of proposal representations")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--role", choices=["imaginary", "real_weak", "real_boxed"])
    x.add_argument("--n-per-class", dest="n_per_class", type=int)
    x.add_argument("--proposals", choices=["selective", "grid"])
    x.add_argument("--max-proposals", dest="max_proposals", type=int)
    x.add_argument("--workers", type=int)
    _add_common(x)
    x.set_defaults(func=cmd_export_features)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, ArgumentError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TransportError, ProtocolError, GenerationError) as exc:
        print(f"service error: {exc}", file=sys.stderr)
        return EXIT_SERVICE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ImdetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
