"""``mml`` command line: generate, train, pipeline, eval, plot.

Outputs go to a run directory ``<root>/<timestamp>_seed<seed>`` where root is
``$MML_RUN_DIR`` (default ``./runs``); ``--run-dir`` names one explicitly.
Failures print one JSON line on stderr and exit with 2 (config or input
error), 3 (stage failure) or 4 (numerical abort).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluate, net
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import build_dataset
from .modality import CHANNELS
from .pipeline import Runner, StageFailure, run_pipeline
from .plotting import read_metric_logs, write_curves
from .sampling import SamplingSpec, parse_test_spec
from .synthvid import generate_dataset, save_dataset
from .train import NumericalAbort, load_checkpoint, save_checkpoint, train_distill, train_mutual, train_single
from .train import write_metric_log

log = logging.getLogger("mml")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_NUMERIC = 0, 2, 3, 4


class InputError(Exception):
    pass


def run_root() -> Path:
    return Path(os.environ.get("MML_RUN_DIR", "runs"))


def make_run_dir(args, seed: int, command: str) -> Path:
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        root = run_root()
        previous = sorted(root.glob(f"*_seed{seed}_{command}")) if root.exists() else []
        if getattr(args, "resume", False) and previous:
            path = previous[-1]
        else:
            stamp = time.strftime("%Y%m%d-%H%M%S")
            path = root / f"{stamp}_seed{seed}_{command}"
            n = 1
            while path.exists():
                path = root / f"{stamp}-{n}_seed{seed}_{command}"
                n += 1
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _dataset(cfg: RunConfig, run_dir: Path):
    # flows are keyed by content, so one cache can serve every run under the root
    cache = Path(os.environ.get("MML_FLOW_CACHE") or run_dir.parent / "flow_cache")
    return build_dataset(cfg.dataset, cache_dir=cache)


def _need_file(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"file not found: {p}")
    return p


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# --------------------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    cfg = _config(args)
    run_dir = make_run_dir(args, cfg.dataset.seed, "generate")
    train, val = generate_dataset(cfg.dataset)
    hashes = save_dataset(run_dir / "data", cfg.dataset, train, val)
    (run_dir / "config.yaml").write_text(dump_config(cfg))
    _emit({"run_dir": str(run_dir), "train": len(train), "val": len(val), "sha256": hashes})
    return EXIT_OK


def _init_for(spec, modality, init, seed):
    if init in (None, "random"):
        return net.init_weights(spec, seed)
    w, _, _ = load_checkpoint(_need_file(init))
    return net.transfer_weights(w, spec, allow_reverse=True)


def cmd_train(args) -> int:
    cfg = _config(args)
    seed = cfg.train.seed if args.seed is None else args.seed
    train_cfg = cfg.train.replace(seed=seed)
    method = args.method or train_cfg.method
    modalities = [m.strip() for m in args.modality.split(",")] if args.modality else ["RGB"]
    for m in modalities:
        if m not in CHANNELS:
            raise InputError(f"unknown modality {m!r}")
    inits = list(args.init or [])
    if method == "mutual" and len(modalities) < 2:
        modalities = modalities * 2
    n_models = len(modalities) if method == "mutual" else 1
    if len(inits) > n_models:
        raise InputError(f"{len(inits)} --init values for {n_models} model(s)")
    inits += ["random"] * (n_models - len(inits))
    if method in ("mars", "d3d") and not args.teacher:
        raise InputError(f"--teacher is required for {method}")
    if method not in ("mutual",) and len(modalities) != 1:
        raise InputError(f"method {method} trains one model; got modalities {modalities}")

    run_dir = make_run_dir(args, seed, "train")
    data = _dataset(cfg, run_dir)
    models = []
    for i, (mod, init) in enumerate(zip(modalities, inits)):
        spec = cfg.model_spec(mod)
        w = _init_for(spec, mod, init, seed * 1000 + i)
        save_checkpoint(run_dir / f"model{i}_{mod.lower()}_init.mml", w, spec, mod)
        models.append((w, spec, mod))

    if method == "mutual":
        results = train_mutual(models, data, train_cfg, names=[f"model{i}_{m.lower()}" for i, m in enumerate(modalities)])
    elif method == "solo":
        results = [train_single(*models[0], data, train_cfg, name=f"model0_{modalities[0].lower()}")]
    else:
        tw, tspec, tmod = load_checkpoint(_need_file(args.teacher))
        results = [train_distill(models[0], (tw, tspec, tmod), data, train_cfg, method,
                                 name=f"model0_{modalities[0].lower()}")]
    out = []
    logs = []
    for r in results:
        path = run_dir / f"{r.name}.mml"
        digest = save_checkpoint(path, r.best_weights, r.spec, r.modality,
                                 extra={"best_epoch": r.best_epoch, "best_metric": r.best_metric})
        if args.save_last:
            save_checkpoint(run_dir / f"{r.name}_last.mml", r.weights, r.spec, r.modality)
        logs.extend(r.log)
        out.append({"checkpoint": str(path), "sha256": digest, "best_epoch": r.best_epoch,
                    "best_metric": r.best_metric})
    write_metric_log(run_dir / "metrics.jsonl", logs)
    (run_dir / "config.yaml").write_text(dump_config(cfg))
    _emit({"run_dir": str(run_dir), "method": method, "models": out})
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    preset = args.preset or cfg.pipeline.preset
    seed = cfg.pipeline.seed if args.seed is None else args.seed
    modalities = [m.strip() for m in args.modalities.split(",")] if args.modalities else list(cfg.pipeline.modalities)
    run_dir = make_run_dir(args, seed, "pipeline")
    data = _dataset(cfg, run_dir)
    runner = Runner(run_dir, data, cfg.model_spec("RGB"), cfg.train, resume=args.resume or bool(args.run_dir),
                    stage_configs=cfg.stage_configs())
    result = run_pipeline(preset, runner, modalities, seed)
    (run_dir / "config.yaml").write_text(dump_config(cfg))
    _emit({"run_dir": str(run_dir), "manifest": str(result.manifest_path), "n_runs": result.n_runs,
           "trained_groups": runner.executed,
           "final": {m: r.checkpoint for m, r in result.final.items()}})
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    spec_text = args.spec or cfg.eval.spec
    try:
        k, m = parse_test_spec(spec_text)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    paths = [_need_file(p) for p in (args.checkpoints or cfg.eval.checkpoints)]
    if not paths:
        raise InputError("no checkpoints given")
    run_dir = make_run_dir(args, cfg.dataset.seed, "eval")
    data = _dataset(cfg, run_dir)
    base = cfg.train.sampling
    scores = {}
    rows = []
    for path in paths:
        w, spec, mod = load_checkpoint(path)
        if spec.n_cls != data.n_cls:
            raise InputError(f"{path}: model has {spec.n_cls} classes, dataset {data.n_cls}")
        sampling = SamplingSpec(base.strategy, spec.n_in, base.tau, k, m)
        sampling.validate(data.val.length(mod))
        s = evaluate.multiclip_predict(w, spec, data.val, mod, sampling)
        name = f"{path.stem}:{mod}"
        scores[name] = s
        for metric, value in evaluate.metrics(evaluate.prediction_batch(s, data.val)).items():
            rows.append({"model": name, "modality": mod, "spec": spec_text, "clips_per_video": k + m,
                         "metric": metric, "value": value})
    if len(scores) > 1:
        ens = evaluate.ensemble_predict(list(scores.values()), renormalize=not data.val.multilabel)
        for metric, value in evaluate.metrics(evaluate.prediction_batch(ens, data.val)).items():
            rows.append({"model": "ensemble", "modality": "+".join(scores), "spec": spec_text,
                         "clips_per_video": k + m, "metric": metric, "value": value})
        evaluate.write_grid_csv(run_dir / "ensemble_grid.csv", evaluate.ensemble_grid(scores, data.val))
    evaluate.write_report(run_dir / "report.jsonl", rows)
    _emit({"run_dir": str(run_dir), "spec": spec_text, "clips_per_video": k + m, "results": rows})
    return EXIT_OK


def cmd_plot(args) -> int:
    paths = [_need_file(p) for p in args.logs]
    try:
        rows = read_metric_logs(paths)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    out = Path(args.out) if args.out else make_run_dir(args, 0, "plot")
    csv_path, svg_path = write_curves(rows, out)
    _emit({"csv": str(csv_path), "svg": str(svg_path), "records": len(rows)})
    return EXIT_OK


# --------------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mml", description="Mutual modality learning on synthetic video.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("config", nargs="?", help="YAML run config (defaults when omitted)")
        sp.add_argument("--run-dir", help="write into this directory instead of a new timestamped one")

    g = sub.add_parser("generate", help="write the synthetic dataset")
    common(g)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one model, a mutual group, or a distilled student")
    common(t)
    t.add_argument("--method", choices=["solo", "mutual", "mars", "d3d"])
    t.add_argument("--modality", help="modality, or comma-separated list for --method mutual")
    t.add_argument("--init", action="append", help="'random' or a checkpoint path; repeat per model")
    t.add_argument("--teacher", help="frozen teacher checkpoint for mars/d3d")
    t.add_argument("--seed", type=int)
    t.add_argument("--save-last", action="store_true", help="also save last-epoch weights")
    t.set_defaults(func=cmd_train)

    pl = sub.add_parser("pipeline", help="run the solo or ensemble multi-stage pipeline")
    common(pl)
    pl.add_argument("--preset", choices=["solo", "ensemble"])
    pl.add_argument("--modalities", help="comma-separated, e.g. RGB,Flow,Diff")
    pl.add_argument("--seed", type=int)
    pl.add_argument("--resume", action="store_true", help="reuse finished stages of the latest matching run")
    pl.set_defaults(func=cmd_pipeline)

    e = sub.add_parser("eval", help="evaluate checkpoints (and their ensemble) on the val split")
    common(e)
    e.add_argument("--checkpoints", nargs="+")
    e.add_argument("--spec", help="test clips, e.g. 'dense:1,uniform:2'")
    e.set_defaults(func=cmd_eval)

    pt = sub.add_parser("plot", help="CSV + SVG curves from metrics.jsonl files")
    pt.add_argument("logs", nargs="+")
    pt.add_argument("--out", help="output directory")
    pt.add_argument("--run-dir", help=argparse.SUPPRESS)
    pt.set_defaults(func=cmd_plot)
    return p


def _fail(code: int, kind: str, exc: Exception, **extra) -> int:
    print(json.dumps({"error": kind, "code": code, "message": str(exc), **extra}, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore")
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc, line=exc.line)
    except (InputError, FileNotFoundError) as exc:
        return _fail(EXIT_CONFIG, "input", exc)
    except StageFailure as exc:
        return _fail(EXIT_STAGE, "stage", exc, stage=exc.stage_id)
    except NumericalAbort as exc:
        return _fail(EXIT_NUMERIC, "numerical", exc)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, "invalid", exc)


if __name__ == "__main__":
    sys.exit(main())
