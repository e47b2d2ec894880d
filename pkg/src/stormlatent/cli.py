"""Command-line entry point: gen-data, train, eval, predict, attribute, ablate."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import ablation as abl
from .attribution import aggregate_attribution, attribute_window, attribution_csv
from .config import ConfigError, RunConfig, format_config, parse_config
from .data import DataError, GeneratorConfig, channel_names, generate_dataset, normalize_sequence, read_split, write_dataset
from .hta import build_hta_schedule
from .metrics import evaluate_run
from .tensorio import FormatError, load_archive, save_archive
from .train import NumericError, evaluate, fit, forecast, load_checkpoint, truth_window, worker_count

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OTHER = 0, 2, 3, 4, 1


class UsageError(ValueError):
    pass


def _load_config(path) -> RunConfig:
    return RunConfig() if path is None else parse_config(path)


def _seq_stem(seq, fallback: int) -> str:
    return f"seq_{int(seq.metadata.get('index', fallback)):05d}"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, verb: str, args: dict, cfg: RunConfig | None, seed) -> Path:
    """Config echo, seed and a hash of every artifact under ``out``."""
    artifacts = {
        str(p.relative_to(out)): _sha256(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name not in ("manifest.json",)
    }
    manifest = {
        "verb": verb,
        "arguments": {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(args.items()) if k != "out"},
        "seed": seed,
        "config": None if cfg is None else format_config(cfg),
        "artifacts": artifacts,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _echo_config(out: Path, cfg: RunConfig) -> None:
    (out / "run_config.txt").write_text(format_config(cfg))


def _maybe_dump_schedule(args, out: Path, horizon: int) -> None:
    if args.debug:
        (out / "schedule.csv").write_text(build_hta_schedule(horizon).to_csv())


# ---------------------------------------------------------------------------
# verbs


def cmd_gen_data(args) -> dict:
    out = args.out
    gcfg = GeneratorConfig(
        height=args.height,
        width=args.width,
        coarse_height=max(1, args.height // 4),
        coarse_width=max(1, args.width // 4),
        steps=args.steps,
    )
    try:
        gcfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    splits = generate_dataset(args.seed, args.sequences, gcfg, args.sequences_per_month, worker_count())
    write_dataset(out, splits)
    return {"seed": args.seed, "cfg": None}


def cmd_train(args) -> dict:
    cfg = _load_config(args.config)
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=args.epochs))
        cfg.train.validate()
    _echo_config(args.out, cfg)
    splits = {s: read_split(args.data, s) for s in ("train", "val")}
    log_lines = []
    fit(splits, cfg.train, args.out, log_lines.append)
    _maybe_dump_schedule(args, args.out, cfg.train.horizon)
    return {"seed": cfg.train.seed, "cfg": cfg}


def _load_predictions(pred_dir: Path, seqs) -> np.ndarray:
    out = []
    for i, s in enumerate(seqs):
        path = pred_dir / f"{_seq_stem(s, i)}.lptf"
        if not path.is_file():
            raise DataError(f"no forecast for {path.stem} in {pred_dir}")
        out.append(load_archive(path)["forecast"])
    return np.stack(out)


def cmd_eval(args) -> dict:
    cfg = _load_config(args.config)
    seqs = read_split(args.data, args.split)
    if not seqs:
        raise DataError(f"split {args.split!r} is empty")
    horizon = args.horizon or cfg.train.horizon
    if args.predictions is not None:
        pred = _load_predictions(args.predictions, seqs)
        if pred.shape[1] != horizon:
            raise DataError(f"forecasts cover {pred.shape[1]} leads, expected {horizon}")
        table = evaluate_run(pred, truth_window(seqs, horizon), cfg.thresholds, cfg.hss_standard)
        seed = None
    else:
        if args.checkpoint is None:
            raise UsageError("eval needs --checkpoint or --predictions")
        model, stats, tcfg = load_checkpoint(args.checkpoint)
        table = evaluate(model, seqs, stats, horizon, cfg.thresholds, tcfg.val_batch, cfg.hss_standard)
        seed = tcfg.seed
    (args.out / "metrics.csv").write_text(table.to_csv())
    if args.plot:
        from .plotting import plot_all_thresholds

        plot_all_thresholds({"forecast": table}, args.out, "scores")
    _maybe_dump_schedule(args, args.out, horizon)
    return {"seed": seed, "cfg": cfg}


def cmd_predict(args) -> dict:
    if args.truth:
        seqs = read_split(args.data, args.split)
        horizon = args.horizon or 24
        pred = truth_window(seqs, horizon)
        seed = None
    else:
        if args.checkpoint is None:
            raise UsageError("predict needs --checkpoint (or --truth)")
        model, stats, tcfg = load_checkpoint(args.checkpoint)
        seqs = read_split(args.data, args.split)
        horizon = args.horizon or tcfg.horizon
        pred = forecast(model, [normalize_sequence(s, stats) for s in seqs], stats, horizon, tcfg.val_batch)
        seed = tcfg.seed
    d = args.out / "forecasts"
    d.mkdir(parents=True, exist_ok=True)
    for i, (s, p) in enumerate(zip(seqs, pred)):
        save_archive(d / f"{_seq_stem(s, i)}.lptf", {"forecast": p})
    _maybe_dump_schedule(args, args.out, horizon)
    return {"seed": seed, "cfg": None}


def cmd_attribute(args) -> dict:
    cfg = _load_config(args.config)
    model, stats, tcfg = load_checkpoint(args.checkpoint)
    seqs = read_split(args.data, args.split)[: args.samples]
    if not seqs:
        raise DataError(f"split {args.split!r} is empty")
    steps = args.steps or cfg.ig_steps
    names = channel_names(seqs[0].qpe_radar.shape[1], seqs[0].satellite is not None)
    maps = []
    for s in seqs:
        ns = normalize_sequence(s, stats)
        x = {"qpe_radar": ns.qpe_radar[:5], "reanalysis": ns.reanalysis[:5]}
        if ns.satellite is not None:
            x["satellite"] = ns.satellite[:5]
        for group in cfg.lead_groups:
            maps.append(attribute_window(model, x, ns.time_index[:5], group, stats.tau_norm, steps))
    (args.out / "attribution.csv").write_text(attribution_csv(aggregate_attribution(maps, names)))
    return {"seed": tcfg.seed, "cfg": cfg}


def cmd_ablate(args) -> dict:
    cfg = _load_config(args.config)
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=args.epochs))
        cfg.train.validate()
    _echo_config(args.out, cfg)
    splits = {s: read_split(args.data, s) for s in ("train", "val", "test")}
    suites = abl.SUITES if args.suite == "all" else (args.suite,)
    runners = {"loss": abl.loss_ladder, "space": abl.space_comparison, "sampling": abl.sampling_comparison}
    outcomes = []
    for suite in suites:
        outcomes += runners[suite](splits, cfg.train, thresholds=cfg.thresholds, out_dir=args.out)
    (args.out / "ablation.csv").write_text(abl.combined_csv(outcomes))
    (args.out / "summary.csv").write_text(abl.summary_csv(outcomes))
    if args.plot:
        from .plotting import plot_all_thresholds

        for suite in suites:
            tables = {o.variant: o.table for o in outcomes if o.suite == suite}
            plot_all_thresholds(tables, args.out / suite, f"{suite}_scores")
    return {"seed": cfg.train.seed, "cfg": cfg}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "attribute": cmd_attribute,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stormlatent", description="Latent-space precipitation nowcasting toolkit.")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, data=True):
        sp.add_argument("--out", type=Path, required=True, help="output directory (created if missing)")
        sp.add_argument("--debug", action="store_true", help="also write the rollout schedule as schedule.csv")
        if data:
            sp.add_argument("--data", type=Path, required=True, help="dataset root with train/val/test splits")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(g, data=False)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sequences", type=int, default=60)
    g.add_argument("--sequences-per-month", type=int, default=10)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--steps", type=int, default=29)

    t = sub.add_parser("train", help="train a model and keep the best validation checkpoint")
    common(t)
    t.add_argument("--config", type=Path)
    t.add_argument("--epochs", type=int, help="override the configured epoch count")

    e = sub.add_parser("eval", help="score a checkpoint or stored forecasts against a split")
    common(e)
    e.add_argument("--config", type=Path)
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--predictions", type=Path, help="directory of forecast archives from predict")
    e.add_argument("--split", default="test")
    e.add_argument("--horizon", type=int)
    e.add_argument("--plot", action="store_true", help="render lead-time score curves next to the CSV")

    r = sub.add_parser("predict", help="write forecast archives for a split")
    common(r)
    r.add_argument("--checkpoint", type=Path)
    r.add_argument("--split", default="test")
    r.add_argument("--horizon", type=int)
    r.add_argument("--truth", action="store_true", help="emit the observed future instead of a model forecast")

    a = sub.add_parser("attribute", help="integrated-gradients attribution per input variable")
    common(a)
    a.add_argument("--config", type=Path)
    a.add_argument("--checkpoint", type=Path, required=True)
    a.add_argument("--split", default="test")
    a.add_argument("--samples", type=int, default=4)
    a.add_argument("--steps", type=int, help="path steps (default from config, 128)")

    b = sub.add_parser("ablate", help="run comparison suites and write a combined CSV")
    common(b)
    b.add_argument("--config", type=Path)
    b.add_argument("--suite", choices=abl.SUITES + ("all",), default="all")
    b.add_argument("--epochs", type=int, help="override the configured epoch count")
    b.add_argument("--plot", action="store_true", help="render lead-time score curves per suite")
    return p


def _fail(kind: str, code: int, exc: BaseException) -> int:
    msg = str(exc).replace("\n", " ").replace('"', "'")
    print(f'error kind={kind} code={code} message="{msg}"', file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        info = COMMANDS[args.verb](args)
        write_manifest(args.out, args.verb, vars(args), info.get("cfg"), info.get("seed"))
    except (ConfigError, UsageError) as exc:
        return _fail("config", EXIT_CONFIG, exc)
    except (DataError, FormatError, FileNotFoundError) as exc:
        return _fail("data", EXIT_DATA, exc)
    except NumericError as exc:
        return _fail("numeric", EXIT_NUMERIC, exc)
    except ValueError as exc:
        return _fail("config", EXIT_CONFIG, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
