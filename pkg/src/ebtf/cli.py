"""Command-line entry points.

Pipeline commands (all driven by a JSON config or a named preset):

    gen-corpus       materialize corpus manifests and finetuning CSVs
    pretrain         train one checkpoint per pretraining prior
    finetune         adapt a checkpoint on an unlabeled CSV
    eval             score a checkpoint on a dataset
    sweep-distance   fixed-size sweep across pretraining priors
    sweep-n          sample-size sweep per pretraining prior
    report           charts + summary table from a records CSV

Exit codes: 0 success, 2 configuration problem, 3 runtime or numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib.resources import files
from pathlib import Path

import numpy as np

from . import __version__
from . import model as M
from .autodiff import NumericalError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .datagen import (
    Dataset,
    derive_rng,
    describe,
    export_dataset_csv,
    load_dataset_csv,
)
from .experiments import (
    ConfigError,
    ExperimentConfig,
    child_seed,
    pretrain_prior_list,
    prior_from_spec,
    realized_target,
    run_pretrain,
    run_sweep_distance,
    run_sweep_n,
    spec_of_prior,
    target_oracle,
    _real_observations,
    _test_set,
)
from .oracle import estimation_error
from .decisions import newsvendor_excess_risk
from .report import ReportError, render
from .training import corpus_for, finetune, stein_loss

PRESETS = ("fig3", "fig4", "fig5", "ci")


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    return files("ebtf").joinpath("presets", f"{name}.cfg").read_text("utf-8")


def _load_config(args) -> ExperimentConfig:
    if args.preset and args.config:
        raise ConfigError("give either --preset or --config, not both")
    if args.preset:
        data = json.loads(preset_text(args.preset))
    elif args.config:
        return _apply_overrides(ExperimentConfig.from_file(args.config), args)
    else:
        raise ConfigError("a --config file or a --preset is required")
    return _apply_overrides(ExperimentConfig.from_dict(data), args)


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg.root_seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "timings", False):
        cfg.timings = True
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    pcfg = cfg.pretrain_config()
    for i, prior in enumerate(pretrain_prior_list(cfg)):
        corpus = corpus_for(prior, pcfg, cfg.sigma,
                            child_seed(cfg.root_seed, "corpus", i))
        path = out / f"corpus_{i:02d}.json"
        path.write_text(corpus.manifest(), encoding="utf-8")
    target = realized_target(cfg)
    seed = cfg.seeds[0]
    theta, obs = _test_set(cfg, target, seed)
    export_dataset_csv(out / "target_labeled.csv",
                       Dataset(obs=obs, theta=theta, sigma=cfg.sigma))
    for n in cfg.n_grid:
        real = _real_observations(cfg, target, n, seed)
        export_dataset_csv(out / f"finetune_n{n}.csv",
                           Dataset(obs=real, sigma=cfg.sigma),
                           withhold_theta=True)
    print(f"wrote corpus manifests and datasets to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    manifest = run_pretrain(cfg, _out_dir(cfg) / "checkpoints",
                            workers=args.workers)
    print(f"pretraining finished; manifest at {manifest}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset_csv(args.data, sigma=cfg.sigma)
    adapters, report = finetune(ckpt.params, ckpt.config, ds.obs, cfg.sigma,
                                cfg.finetune_config(),
                                derive_rng(cfg.root_seed, "cli-finetune"))
    save_checkpoint(out / "finetuned.ckpt", ckpt.params, ckpt.config,
                    adapters=adapters,
                    meta={"base_checkpoint": str(args.checkpoint),
                          "observations": ds.n, "finetune": report.config})
    report.export_csv(out / "finetune_trace.csv")
    print(f"finetuned on {ds.n} observations; final loss "
          f"{report.losses[-1]:.6f}; wrote {out / 'finetuned.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset_csv(args.data, sigma=cfg.sigma)
    estimates = M.apply(ckpt.params, ds.obs, ckpt.config,
                        adapters=ckpt.adapters or None).ravel()
    target = realized_target(cfg)
    oracle = target_oracle(cfg, target)
    oracle_est = oracle(ds.obs.ravel())
    metrics = {
        "observations": ds.n,
        "target": describe(prior_from_spec(cfg.target)),
        "mse_vs_oracle": estimation_error(estimates, oracle_est),
        "stein_loss": stein_loss(ckpt.params, ckpt.config, ds.obs, cfg.sigma,
                                 mode="hutchinson",
                                 adapters=ckpt.adapters or None,
                                 rng=derive_rng(cfg.root_seed, "cli-eval"),
                                 max_seq=1024),
    }
    if ds.theta is not None:
        theta = ds.theta.ravel()
        metrics["mse_vs_labels"] = float(((estimates - theta) ** 2).mean())
        excess, se = newsvendor_excess_risk(estimates, oracle_est, theta,
                                            cfg.sigma, b=cfg.newsvendor_b,
                                            h=cfg.newsvendor_h)
        metrics["excess_risk"] = excess
        metrics["excess_risk_se"] = se
    with open(out / "estimates.csv", "w", encoding="utf-8") as fh:
        fh.write("index,estimate\n")
        for i, value in enumerate(estimates):
            fh.write(f"{i},{value!r}\n")
    (out / "eval.json").write_text(json.dumps(metrics, indent=2, sort_keys=True),
                                   encoding="utf-8")
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


def cmd_sweep_distance(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    path = run_sweep_distance(cfg, out / "checkpoints", out, workers=args.workers)
    print(f"distance sweep written to {path}")
    return 0


def cmd_sweep_n(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    path = run_sweep_n(cfg, out / "checkpoints", out, workers=args.workers)
    print(f"size sweep written to {path}")
    return 0


def cmd_report(args) -> int:
    records = Path(args.records) if args.records else None
    out = Path(args.out) if args.out else None
    if args.config or args.preset:
        cfg_out = _out_dir(_load_config(args))
        out = out or cfg_out
        records = records or cfg_out / "records.csv"
    if records is None:
        if out is None:
            raise ConfigError("report needs --records, --out, or a config")
        records = out / "records.csv"
    written = render(records, out or records.parent, kind=args.kind)
    for path in written:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ebtf",
        description="Pretrain/finetune experiment harness for sequence "
                    "models that denoise exchangeable observations.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, workers=False, timings=False):
        p.add_argument("--config", metavar="PATH",
                       help="JSON experiment config")
        p.add_argument("--preset", choices=PRESETS,
                       help="named built-in config")
        p.add_argument("--seed", type=int, metavar="U64",
                       help="override the config root seed")
        p.add_argument("--out", metavar="DIR",
                       help="override the config output directory")
        if workers:
            p.add_argument("--workers", type=int, default=1, metavar="K",
                           help="parallel worker processes (default 1)")
        if timings:
            p.add_argument("--timings", action="store_true",
                           help="write real wall-clock seconds into the "
                            "records CSV (breaks byte-reproducibility)")

    common(sub.add_parser("gen-corpus", help="write corpus manifests and "
                          "finetuning datasets"))
    common(sub.add_parser("pretrain", help="train checkpoints for every "
                          "pretraining prior"), workers=True)

    p = sub.add_parser("finetune", help="adapt a checkpoint on an unlabeled CSV")
    common(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--data", required=True, metavar="CSV")

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--data", required=True, metavar="CSV")

    common(sub.add_parser("sweep-distance", help="excess risk across "
                          "pretraining priors"), workers=True, timings=True)
    common(sub.add_parser("sweep-n", help="excess risk across finetuning "
                          "sizes"), workers=True, timings=True)

    p = sub.add_parser("report", help="render charts and a summary table")
    common(p)
    p.add_argument("--records", metavar="CSV", help="records file "
                   "(default: <out>/records.csv)")
    p.add_argument("--kind", choices=("distance", "n"),
                   help="override sweep-kind inference")
    return parser


_HANDLERS = {
    "gen-corpus": cmd_gen_corpus,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "sweep-distance": cmd_sweep_distance,
    "sweep-n": cmd_sweep_n,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = _HANDLERS[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, ReportError, NumericalError, FileNotFoundError,
            OSError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
