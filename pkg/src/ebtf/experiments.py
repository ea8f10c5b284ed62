"""Config-driven experiment harness.

Builds pretrained checkpoints for a family of pretraining priors, then runs
the two sweep layouts:

* distance sweep — fixed finetuning size, many pretraining priors; shows how
  pretrained-only quality decays with prior mismatch while finetuning levels
  it out;
* size sweep — few priors, a grid of finetuning sizes; shows excess risk
  falling as more unlabeled observations arrive.

Every cell is reproducible in isolation: child seeds derive from the root
seed plus the cell's coordinates, so reruns and parallel workers agree.
Records go to a fixed-schema CSV; wall-clock timings go to the run manifest
(the CSV's wall_seconds column stays at 0.0 unless `timings` is set, keeping
the CSV byte-reproducible).
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import model as M
from .checkpoint import load_checkpoint, save_checkpoint
from .datagen import (
    DirichletProcess,
    Exponential,
    GaussianMixture,
    NeuralPrior,
    PointMassSet,
    Prior,
    Uniform,
    derive_rng,
    describe,
    random_pretrain_prior,
    sample_prior,
    standard_target,
)
from .decisions import newsvendor_excess_risk
from .oracle import (
    MarginalDensity,
    Oracle,
    estimation_error,
    hellinger_mc,
    l2_mean_distance,
    marginal_of,
)
from .training import (
    FinetuneConfig,
    PretrainConfig,
    corpus_for,
    finetune,
    pretrain,
    train_from_scratch,
)
from .autodiff import NumericalError


class ConfigError(ValueError):
    """Invalid experiment configuration (maps to CLI exit code 2)."""


VARIANTS = ("oracle", "plugin", "pretrained", "finetuned", "scratch")

CSV_HEADER = ("run_id,seed,target,pretrain,l2_distance,hellinger,"
              "n,variant,mse_vs_oracle,excess_risk,wall_seconds")


# ---------------------------------------------------------------------------
# prior specifications (the JSON-facing encoding of datagen priors)
# ---------------------------------------------------------------------------

def prior_from_spec(spec) -> Prior:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError(f"prior spec must be a dict with a 'kind': {spec!r}")
    kind = spec["kind"]
    try:
        if kind == "standard":
            return standard_target()
        if kind == "gmm":
            return GaussianMixture(tuple(spec["weights"]), tuple(spec["means"]),
                                   tuple(spec["variances"]))
        if kind == "exponential":
            return Exponential(float(spec["mean"]))
        if kind == "uniform":
            return Uniform(float(spec["low"]), float(spec["high"]))
        if kind == "atoms":
            return PointMassSet(tuple(spec["atoms"]), tuple(spec["weights"]))
        if kind == "dp":
            return DirichletProcess(float(spec["alpha"]),
                                    prior_from_spec(spec["base"]))
        if kind == "neural":
            return NeuralPrior(seed=int(spec["seed"]),
                               n_nets=int(spec.get("n_nets", 4)),
                               input_dim=int(spec.get("input_dim", 4)),
                               hidden=int(spec.get("hidden", 16)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad prior spec {spec!r}: {exc}") from exc
    raise ConfigError(f"unknown prior kind {kind!r}")


def spec_of_prior(prior: Prior) -> dict:
    if isinstance(prior, GaussianMixture):
        return {"kind": "gmm", "weights": list(prior.weights),
                "means": list(prior.means), "variances": list(prior.variances)}
    if isinstance(prior, Exponential):
        return {"kind": "exponential", "mean": prior.mean}
    if isinstance(prior, Uniform):
        return {"kind": "uniform", "low": prior.low, "high": prior.high}
    if isinstance(prior, PointMassSet):
        return {"kind": "atoms", "atoms": list(prior.atoms),
                "weights": list(prior.weights)}
    if isinstance(prior, DirichletProcess):
        return {"kind": "dp", "alpha": prior.alpha,
                "base": spec_of_prior(prior.base)}
    if isinstance(prior, NeuralPrior):
        return {"kind": "neural", "seed": prior.seed, "n_nets": prior.n_nets,
                "input_dim": prior.input_dim, "hidden": prior.hidden}
    raise TypeError(f"unknown prior type {type(prior).__name__}")


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    name: str = "experiment"
    root_seed: int = 0
    out_dir: str = "runs"
    sigma: float = 1.0
    target: dict = field(default_factory=lambda: {"kind": "standard"})
    pretrain_priors: list | None = None      # explicit specs, or None = random
    n_pretrain_priors: int = 15
    model: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    n_grid: list = field(default_factory=lambda: [500])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    variants: list = field(default_factory=lambda:
                           ["oracle", "pretrained", "finetuned", "scratch"])
    test_n: int = 500
    newsvendor_b: float = 2.0
    newsvendor_h: float = 2.0
    oracle_atoms: int = 200_000
    environment_atoms: int = 2000
    hellinger_samples: int = 20_000
    hellinger_atoms: int = 20_000
    timings: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.name or any(c in self.name for c in ",\n"):
            raise ConfigError(f"bad experiment name {self.name!r}")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        if not self.n_grid or any(n < 1 for n in self.n_grid):
            raise ConfigError("n_grid must be non-empty with entries >= 1")
        if list(self.n_grid) != sorted(set(self.n_grid)):
            raise ConfigError("n_grid must be strictly increasing")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if not self.variants:
            raise ConfigError("need at least one variant")
        unknown = set(self.variants) - set(VARIANTS)
        if unknown:
            raise ConfigError(f"unknown variants {sorted(unknown)}; "
                              f"choose from {list(VARIANTS)}")
        if self.test_n < 2:
            raise ConfigError("test_n must be >= 2")
        if min(self.newsvendor_b, self.newsvendor_h) <= 0:
            raise ConfigError("newsvendor costs must be positive")
        prior_from_spec(self.target)
        if self.pretrain_priors is not None:
            if not self.pretrain_priors:
                raise ConfigError("pretrain_priors must be non-empty if given")
            for spec in self.pretrain_priors:
                prior_from_spec(spec)
        elif self.n_pretrain_priors < 1:
            raise ConfigError("n_pretrain_priors must be >= 1")
        # materialize the sub-configs now so bad fields fail at load time
        self.model_config()
        self.pretrain_config()
        self.finetune_config()

    # -- sub-config builders -------------------------------------------------

    def model_config(self) -> M.ModelConfig:
        try:
            return M.ModelConfig(**self.model)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad model config: {exc}") from exc

    def pretrain_config(self) -> PretrainConfig:
        try:
            return PretrainConfig(**self.pretrain)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad pretrain config: {exc}") from exc

    def finetune_config(self) -> FinetuneConfig:
        kwargs = dict(self.finetune)
        lora = M.LoraConfig(rank=int(kwargs.pop("lora_rank", 8)),
                            scale=float(kwargs.pop("lora_scale", 1.0)))
        try:
            return FinetuneConfig(lora=lora, **kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad finetune config: {exc}") from exc

    # -- (de)serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)


def child_seed(root: int, *parts) -> int:
    """Deterministic 63-bit child seed for a named cell."""
    return int(derive_rng(root, *parts).integers(0, 2 ** 63))


# ---------------------------------------------------------------------------
# targets, oracles, and distances
# ---------------------------------------------------------------------------

def realized_target(cfg: ExperimentConfig) -> Prior:
    """The prior actually generating data for this run.

    A shared-atom process describes a distribution over environments; one
    experiment lives in a single realized environment, so we draw its atoms
    once (seeded by the root) and freeze them.  All other priors pass through.
    """
    prior = prior_from_spec(cfg.target)
    if isinstance(prior, DirichletProcess):
        rng = derive_rng(cfg.root_seed, "environment")
        return PointMassSet.from_draws(
            sample_prior(prior, cfg.environment_atoms, rng))
    return prior


def target_oracle(cfg: ExperimentConfig, target: Prior) -> Oracle:
    if isinstance(target, (GaussianMixture, Exponential, Uniform, PointMassSet)):
        return Oracle.closed_form(target, cfg.sigma)
    return Oracle.monte_carlo(target, cfg.sigma, m=cfg.oracle_atoms,
                              rng=derive_rng(cfg.root_seed, "oracle-atoms"))


def _target_marginal_for_distance(cfg: ExperimentConfig,
                                  target: Prior) -> MarginalDensity:
    """Marginal used in Hellinger estimation; atom-backed targets get a
    moderate atom cache so the density evaluations stay affordable."""
    if isinstance(target, (GaussianMixture, Exponential, Uniform)):
        return marginal_of(target, cfg.sigma)
    if isinstance(target, PointMassSet):
        return marginal_of(target, cfg.sigma)
    return marginal_of(target, cfg.sigma, m=cfg.hellinger_atoms,
                       rng=derive_rng(cfg.root_seed, "hellinger-atoms"))


def prior_distances(cfg: ExperimentConfig, target: Prior,
                    pre: Prior, index: int) -> tuple[float | None, float]:
    """(component-mean L2 distance or None, Hellinger distance) between the
    pretraining prior and the target, both measured on observables where
    Monte Carlo is needed."""
    l2 = None
    if isinstance(target, GaussianMixture) and isinstance(pre, GaussianMixture):
        try:
            l2 = l2_mean_distance(pre, target)
        except ValueError:
            l2 = None
    f = _target_marginal_for_distance(cfg, target)
    g = marginal_of(pre, cfg.sigma)
    hell = hellinger_mc(f, g, cfg.hellinger_samples,
                        derive_rng(cfg.root_seed, "hellinger", index))
    return l2, hell


def pretrain_prior_list(cfg: ExperimentConfig) -> list[Prior]:
    if cfg.pretrain_priors is not None:
        return [prior_from_spec(s) for s in cfg.pretrain_priors]
    return [random_pretrain_prior(derive_rng(cfg.root_seed, "pretrain-prior", i))
            for i in range(cfg.n_pretrain_priors)]


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    run_id: str
    seed: int
    target: str
    pretrain: str          # "" for variants without a pretraining prior
    l2_distance: float | None
    hellinger: float | None
    n: int
    variant: str
    mse_vs_oracle: float
    excess_risk: float
    wall_seconds: float

    def csv_row(self, timings: bool) -> str:
        def num(x):
            return "" if x is None else repr(float(x))
        wall = repr(round(self.wall_seconds, 3)) if timings else "0.0"
        return ",".join([
            self.run_id, str(self.seed), self.target, self.pretrain,
            num(self.l2_distance), num(self.hellinger), str(self.n),
            self.variant, num(self.mse_vs_oracle), num(self.excess_risk), wall,
        ])


def write_records(path, records: list[RunRecord], timings: bool) -> None:
    records = sorted(records, key=_record_order)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        for rec in records:
            fh.write(rec.csv_row(timings) + "\n")


def _record_order(rec: RunRecord):
    prior_tag = rec.run_id.split(":")[1]    # "none" or "pNN"
    return (prior_tag, VARIANTS.index(rec.variant), rec.n, rec.seed)


def read_records(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"unexpected records header in {path}")
    cols = CSV_HEADER.split(",")
    out = []
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != len(cols):
            raise ValueError(f"malformed record line: {line!r}")
        row = dict(zip(cols, parts))
        for key in ("l2_distance", "hellinger", "mse_vs_oracle",
                    "excess_risk", "wall_seconds"):
            row[key] = float(row[key]) if row[key] else None
        row["seed"] = int(row["seed"])
        row["n"] = int(row["n"])
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# pretraining stage
# ---------------------------------------------------------------------------

def checkpoint_path(ckpt_dir, index: int) -> Path:
    return Path(ckpt_dir) / f"pre_{index:02d}.ckpt"


def _pretrain_one(payload: dict) -> dict:
    cfg = ExperimentConfig.from_dict(payload["config"])
    index = payload["index"]
    prior = prior_from_spec(payload["prior"])
    pcfg = cfg.pretrain_config()
    corpus = corpus_for(prior, pcfg, cfg.sigma,
                        child_seed(cfg.root_seed, "corpus", index))
    t0 = time.perf_counter()
    try:
        params, report = pretrain(cfg.model_config(), corpus, pcfg,
                                  derive_rng(cfg.root_seed, "pretrain-init", index))
    except NumericalError as exc:
        return {"index": index, "prior": payload["prior"],
                "label": describe(prior), "error": str(exc)}
    path = checkpoint_path(payload["ckpt_dir"], index)
    save_checkpoint(path, params, cfg.model_config(),
                    meta={"prior": payload["prior"], "index": index,
                          "final_loss": report.losses[-1]})
    return {"index": index, "prior": payload["prior"], "label": describe(prior),
            "final_loss": report.losses[-1], "checksum": report.checksum,
            "wall_seconds": round(time.perf_counter() - t0, 3),
            "checkpoint": path.name}


def run_pretrain(cfg: ExperimentConfig, ckpt_dir, workers: int = 1) -> Path:
    """One checkpoint per pretraining prior, plus a manifest."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    priors = pretrain_prior_list(cfg)
    payloads = [{"config": cfg.to_dict(), "index": i,
                 "prior": spec_of_prior(p), "ckpt_dir": str(ckpt_dir)}
                for i, p in enumerate(priors)]
    rows = _map_cells(_pretrain_one, payloads, workers)
    manifest = {
        "experiment": cfg.name,
        "root_seed": cfg.root_seed,
        "model": cfg.model_config().to_dict(),
        "pretrain": asdict(cfg.pretrain_config()),
        "sigma": cfg.sigma,
        "priors": rows,
    }
    out = ckpt_dir / "pretrain_manifest.json"
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True),
                   encoding="utf-8")
    failed = [r for r in rows if "error" in r]
    if failed:
        print(f"warning: {len(failed)} pretraining run(s) diverged; "
              "see pretrain_manifest.json")
    return out


# ---------------------------------------------------------------------------
# sweep cells
# ---------------------------------------------------------------------------

def _test_set(cfg: ExperimentConfig, target: Prior, seed: int):
    rng = derive_rng(cfg.root_seed, "test", seed)
    theta = sample_prior(target, cfg.test_n, rng)
    obs = theta + cfg.sigma * rng.standard_normal(cfg.test_n)
    return theta, obs.reshape(-1, 1)


def _real_observations(cfg: ExperimentConfig, target: Prior, n: int, seed: int):
    rng = derive_rng(cfg.root_seed, "data", n, seed)
    theta = sample_prior(target, n, rng)
    return (theta + cfg.sigma * rng.standard_normal(n)).reshape(-1, 1)


def _evaluate(cfg: ExperimentConfig, estimates: np.ndarray,
              oracle_est: np.ndarray, theta: np.ndarray) -> tuple[float, float]:
    mse = estimation_error(estimates, oracle_est)
    excess, _ = newsvendor_excess_risk(estimates, oracle_est, theta, cfg.sigma,
                                       b=cfg.newsvendor_b, h=cfg.newsvendor_h)
    return mse, excess


def _run_cell(payload: dict) -> dict:
    """One (variant, prior, n, seed) cell, reconstructed deterministically."""
    cfg = ExperimentConfig.from_dict(payload["config"])
    variant = payload["variant"]
    seed = payload["seed"]
    n = payload["n"]
    index = payload.get("index")
    target = realized_target(cfg)
    oracle = target_oracle(cfg, target)
    theta_test, obs_test = _test_set(cfg, target, seed)
    oracle_est = oracle(obs_test.ravel())

    t0 = time.perf_counter()
    if variant == "oracle":
        estimates = oracle_est
    elif variant == "plugin":
        estimates = obs_test.ravel()
    elif variant == "pretrained":
        ckpt = load_checkpoint(payload["checkpoint"])
        estimates = M.apply(ckpt.params, obs_test, ckpt.config).ravel()
    elif variant == "finetuned":
        ckpt = load_checkpoint(payload["checkpoint"])
        obs_real = _real_observations(cfg, target, n, seed)
        adapters, _ = finetune(ckpt.params, ckpt.config, obs_real, cfg.sigma,
                               cfg.finetune_config(),
                               derive_rng(cfg.root_seed, "finetune", index, n, seed))
        estimates = M.apply(ckpt.params, obs_test, ckpt.config,
                            adapters=adapters).ravel()
    elif variant == "scratch":
        obs_real = _real_observations(cfg, target, n, seed)
        params, _ = train_from_scratch(cfg.model_config(), obs_real, cfg.sigma,
                                       cfg.finetune_config(),
                                       derive_rng(cfg.root_seed, "scratch", n, seed))
        estimates = M.apply(params, obs_test, cfg.model_config()).ravel()
    else:  # pragma: no cover - validated upstream
        raise ValueError(f"unknown variant {variant!r}")
    wall = time.perf_counter() - t0

    mse, excess = _evaluate(cfg, estimates, oracle_est, theta_test)
    prior_tag = f"p{index:02d}" if index is not None else "none"
    return {
        "run_id": f"{cfg.name}:{prior_tag}:{variant}:n{n}:s{seed}",
        "seed": seed,
        "pretrain_label": payload.get("pretrain_label", ""),
        "l2": payload.get("l2"),
        "hellinger": payload.get("hellinger"),
        "n": n,
        "variant": variant,
        "mse": mse,
        "excess": excess,
        "wall": wall,
    }


def _map_cells(fn, payloads: list[dict], workers: int) -> list[dict]:
    if workers <= 1:
        return [fn(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, payloads))


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def _loaded_prior_info(cfg: ExperimentConfig, ckpt_dir,
                       target: Prior) -> list[dict]:
    """Per-prior checkpoint paths, labels and distances; skips priors whose
    pretraining diverged (no checkpoint on disk)."""
    priors = pretrain_prior_list(cfg)
    info = []
    for i, prior in enumerate(priors):
        path = checkpoint_path(ckpt_dir, i)
        if not path.exists():
            raise FileNotFoundError(
                f"missing checkpoint {path}; run the pretrain step first")
        l2, hell = prior_distances(cfg, target, prior, i)
        info.append({"index": i, "label": describe(prior),
                     "checkpoint": str(path), "l2": l2, "hellinger": hell})
    return info


def _common_rows(cfg: ExperimentConfig, n_for_data: int) -> list[dict]:
    """Payloads for the variants that do not depend on a pretraining prior.

    The `n` recorded for data-free variants (oracle, plugin, pretrained) is 0:
    they consume no real observations.
    """
    rows = []
    for seed in cfg.seeds:
        if "oracle" in cfg.variants:
            rows.append({"variant": "oracle", "seed": seed, "n": 0})
        if "plugin" in cfg.variants:
            rows.append({"variant": "plugin", "seed": seed, "n": 0})
        if "scratch" in cfg.variants:
            rows.append({"variant": "scratch", "seed": seed, "n": n_for_data})
    return rows


def csv_label(label: str) -> str:
    """Prior labels may contain commas (e.g. lists of means); keep the
    delimited records parseable by swapping them for semicolons."""
    return label.replace(",", ";")


def _to_record(cfg: ExperimentConfig, target_label: str, cell: dict) -> RunRecord:
    return RunRecord(
        run_id=cell["run_id"], seed=cell["seed"], target=csv_label(target_label),
        pretrain=csv_label(cell["pretrain_label"]), l2_distance=cell["l2"],
        hellinger=cell["hellinger"], n=cell["n"], variant=cell["variant"],
        mse_vs_oracle=cell["mse"], excess_risk=cell["excess"],
        wall_seconds=cell["wall"],
    )


def _finish_sweep(cfg: ExperimentConfig, out_dir, sweep: str,
                  target_label: str, prior_info: list[dict],
                  cells: list[dict]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = [_to_record(cfg, target_label, c) for c in cells]
    csv_path = out_dir / "records.csv"
    write_records(csv_path, records, cfg.timings)
    manifest = {
        "sweep": sweep,
        "experiment": cfg.name,
        "config": cfg.to_dict(),
        "target": target_label,
        "pretrain_priors": [
            {k: v for k, v in info.items() if k != "checkpoint"} |
            {"checkpoint": Path(info["checkpoint"]).name}
            for info in prior_info
        ],
        "rows": len(records),
        "wall_seconds": {c["run_id"]: round(c["wall"], 3) for c in cells},
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return csv_path


def run_sweep_distance(cfg: ExperimentConfig, ckpt_dir, out_dir,
                       workers: int = 1) -> Path:
    """Fixed finetuning size (the largest grid entry), every pretraining
    prior, plus the shared prior-free baselines."""
    target = realized_target(cfg)
    target_label = describe(prior_from_spec(cfg.target))
    prior_info = _loaded_prior_info(cfg, ckpt_dir, target)
    n = cfg.n_grid[-1]
    payloads = []
    base = {"config": cfg.to_dict()}
    for row in _common_rows(cfg, n):
        payloads.append(base | row)
    for info in prior_info:
        for seed in cfg.seeds:
            for variant, n_used in (("pretrained", 0), ("finetuned", n)):
                if variant not in cfg.variants:
                    continue
                payloads.append(base | {
                    "variant": variant, "seed": seed, "n": n_used,
                    "index": info["index"], "checkpoint": info["checkpoint"],
                    "pretrain_label": info["label"], "l2": info["l2"],
                    "hellinger": info["hellinger"],
                })
    cells = _map_cells(_run_cell, payloads, workers)
    return _finish_sweep(cfg, out_dir, "distance", target_label, prior_info, cells)


def run_sweep_n(cfg: ExperimentConfig, ckpt_dir, out_dir,
                workers: int = 1) -> Path:
    """Grid of finetuning sizes per pretraining prior; pretrained-only rows
    appear once per prior as the constant reference."""
    target = realized_target(cfg)
    target_label = describe(prior_from_spec(cfg.target))
    prior_info = _loaded_prior_info(cfg, ckpt_dir, target)
    payloads = []
    base = {"config": cfg.to_dict()}
    for seed in cfg.seeds:
        if "oracle" in cfg.variants:
            payloads.append(base | {"variant": "oracle", "seed": seed, "n": 0})
        if "plugin" in cfg.variants:
            payloads.append(base | {"variant": "plugin", "seed": seed, "n": 0})
        if "scratch" in cfg.variants:
            for n in cfg.n_grid:
                payloads.append(base | {"variant": "scratch", "seed": seed, "n": n})
    for info in prior_info:
        extra = {"index": info["index"], "checkpoint": info["checkpoint"],
                 "pretrain_label": info["label"], "l2": info["l2"],
                 "hellinger": info["hellinger"]}
        for seed in cfg.seeds:
            if "pretrained" in cfg.variants:
                payloads.append(base | extra | {"variant": "pretrained",
                                                "seed": seed, "n": 0})
            if "finetuned" in cfg.variants:
                for n in cfg.n_grid:
                    payloads.append(base | extra | {"variant": "finetuned",
                                                    "seed": seed, "n": n})
    cells = _map_cells(_run_cell, payloads, workers)
    return _finish_sweep(cfg, out_dir, "size", target_label, prior_info, cells)
