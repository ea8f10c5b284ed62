"""Training loops: supervised pretraining on synthetic labeled corpora, and
label-free finetuning that minimises an unbiased surrogate of the mean
squared error built from the observations alone.

The surrogate ("denoising identity" loss) for observations d_i with noise
scale sigma is

    (1/N) sum_i [ ||T(d_i)||^2 - 2 d_i . T(d_i) + 2 sigma^2 div_i(T) ]

whose expectation equals the MSE minus the constant E||theta||^2, so its
minimiser matches the MSE minimiser without ever seeing labels.  The
divergence term div_i is the trace of token i's own-block Jacobian,
estimated from extra forward passes (exact coordinate probing or Rademacher
probes), so the whole loss differentiates with ordinary reverse mode.

Finetuning trains only low-rank adapters on the embedding and output head;
from-scratch training runs the same loss on a freshly initialised network
with every weight trainable.  All loops clip the global gradient norm and
use Adam with bias correction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import model as M
from .checkpoint import params_checksum
from .datagen import PretrainCorpus


@dataclass(frozen=True)
class PretrainConfig:
    iterations: int = 1000
    batch_size: int = 32
    seq_len: int = 512
    lr: float = 1e-3
    clip_norm: float = 10.0

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1 or self.seq_len < 1:
            raise ValueError("iterations, batch_size and seq_len must be >= 1")
        if not (self.lr > 0 and self.clip_norm > 0):
            raise ValueError("lr and clip_norm must be positive")


def corpus_for(prior, cfg: PretrainConfig, sigma: float, seed: int) -> PretrainCorpus:
    """A corpus exactly covering the schedule: one fresh sequence per slot."""
    return PretrainCorpus(prior, cfg.iterations * cfg.batch_size, cfg.seq_len,
                          sigma, seed)


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 10
    lr: float = 0.02
    lora: M.LoraConfig = field(default_factory=M.LoraConfig)
    divergence: str = "hutchinson"
    fd_step: float = 1e-4
    n_probes: int = 1
    full_batch_limit: int = 1024   # above this, split into minibatch sequences
    minibatch: int = 256
    clip_norm: float = 10.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.divergence not in ("hutchinson", "exact"):
            raise ValueError(f"unknown divergence mode {self.divergence!r}")
        if not (self.lr > 0 and self.fd_step > 0 and self.clip_norm > 0):
            raise ValueError("lr, fd_step and clip_norm must be positive")


@dataclass
class TrainReport:
    """Per-step loss trajectory plus provenance of the finished weights."""

    losses: list[float]
    step_wall_ms: list[float]
    wall_seconds: float
    checksum: str
    config: dict

    def export_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,loss,wall_ms\n")
            for i, (loss, ms) in enumerate(zip(self.losses, self.step_wall_ms)):
                fh.write(f"{i},{repr(loss)},{ms:.3f}\n")


# ---------------------------------------------------------------------------
# supervised pretraining
# ---------------------------------------------------------------------------

def pretrain(cfg_model: M.ModelConfig, corpus: PretrainCorpus,
             cfg: PretrainConfig, rng: np.random.Generator
             ) -> tuple[M.ModelParams, TrainReport]:
    """Minimise mean squared error against the corpus labels.

    Each iteration consumes the next ``batch_size`` fresh corpus sequences;
    the corpus must hold at least iterations * batch_size of them.
    """
    need = cfg.iterations * cfg.batch_size
    if corpus.k < need:
        raise ValueError(
            f"corpus holds {corpus.k} sequences but the schedule needs {need}")
    if corpus.seq_len != cfg.seq_len:
        raise ValueError(f"corpus sequence length {corpus.seq_len} does not "
                         f"match the configured {cfg.seq_len}")
    params = M.init_params(cfg_model, rng)
    state = ad.AdamState(lr=cfg.lr)
    losses: list[float] = []
    step_ms: list[float] = []
    t_start = time.perf_counter()
    denom = None
    for step in range(cfg.iterations):
        t0 = time.perf_counter()
        theta, obs = corpus.batch(step * cfg.batch_size, cfg.batch_size)
        if denom is None:
            denom = float(np.prod(obs.shape))
        tape = ad.Tape()
        weights = M.wrap_weights(tape, params, trainable=True)
        try:
            pred = M.forward_graph(tape, tape.constant(obs), weights, cfg_model)
            loss = ad.scale(ad.sum_sq(ad.sub(pred, tape.constant(theta))),
                            1.0 / denom)
        except ad.NumericalError as exc:
            raise ad.NumericalError(
                f"training diverged at step {step} (lr={cfg.lr}): {exc}") from exc
        grads = ad.backward(tape, loss)
        ad.clip_grads_to_norm(grads, cfg.clip_norm)
        ad.adam_step(params, grads, state)
        losses.append(float(loss.value))
        step_ms.append((time.perf_counter() - t0) * 1000.0)
    report = TrainReport(
        losses=losses, step_wall_ms=step_ms,
        wall_seconds=time.perf_counter() - t_start,
        checksum=params_checksum(params),
        config={"pretrain": asdict(cfg), "model": cfg_model.to_dict(),
                "corpus": {"sequences": corpus.k, "seq_len": corpus.seq_len,
                           "sigma": corpus.sigma, "seed": corpus.seed}},
    )
    return params, report


# ---------------------------------------------------------------------------
# the label-free loss
# ---------------------------------------------------------------------------

def _chunk_rows(obs: np.ndarray, max_seq: int | None):
    if max_seq is None or obs.shape[0] <= max_seq:
        return [obs]
    return [obs[i:i + max_seq] for i in range(0, obs.shape[0], max_seq)]


def stein_loss(params: M.ModelParams, cfg_model: M.ModelConfig, obs: np.ndarray,
               sigma: float, mode: str = "exact",
               adapters: M.LoraAdapters | None = None, h: float = 1e-4,
               n_probes: int = 1, rng: np.random.Generator | None = None,
               max_seq: int | None = None) -> float:
    """Evaluate the label-free loss of the current map on observations.

    ``max_seq`` caps the attention context: longer inputs are split into
    consecutive independent sub-sequences (the estimator is then "apply the
    network per chunk", and the loss is exact for that estimator).
    """
    obs = np.asarray(obs, dtype=float)
    if obs.ndim != 2:
        raise ValueError("observations must be (n, p)")
    if mode not in ("exact", "hutchinson"):
        raise ValueError(f"unknown divergence mode {mode!r}")
    total = 0.0
    blocks = _chunk_rows(obs, max_seq)
    if mode == "exact" and len(blocks) > 1:
        # all blocks except possibly the last share max_seq rows; stack them so
        # the finite-difference passes are batched across the whole dataset
        full = blocks[:-1] if blocks[-1].shape[0] != blocks[0].shape[0] else blocks
        rest = blocks[len(full):]
        stack = np.stack(full)
        t_out = M.apply(params, stack, cfg_model, adapters=adapters)
        div = M.divergence_exact_stacked(params, stack, cfg_model,
                                         adapters=adapters, h=h)
        total += float((t_out * t_out).sum() - 2.0 * (stack * t_out).sum()
                       + 2.0 * sigma ** 2 * div.sum())
        blocks = rest
    for block in blocks:
        t_out = M.apply(params, block, cfg_model, adapters=adapters)
        if mode == "exact":
            div = M.divergence_exact(params, block, cfg_model, adapters=adapters, h=h)
        else:
            div = M.divergence_hutchinson(params, block, cfg_model,
                                          adapters=adapters, h=h,
                                          n_probes=n_probes, rng=rng)
        total += float((t_out * t_out).sum() - 2.0 * (block * t_out).sum()
                       + 2.0 * sigma ** 2 * div.sum())
    return total / obs.shape[0]


def estimator_mse(params: M.ModelParams, cfg_model: M.ModelConfig,
                  obs: np.ndarray, theta: np.ndarray,
                  adapters: M.LoraAdapters | None = None,
                  max_seq: int | None = None) -> float:
    """Labeled mean squared error of the map, applied with the same chunking
    convention as :func:`stein_loss` so the two are directly comparable."""
    obs = np.asarray(obs, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if theta.size != obs.size:
        raise ValueError(f"theta has {theta.size} entries for {obs.size} "
                         "observations")
    theta = theta.reshape(obs.shape)
    blocks = _chunk_rows(obs, max_seq)
    if len(blocks) > 1:
        full = blocks[:-1] if blocks[-1].shape[0] != blocks[0].shape[0] else blocks
        preds = [M.apply(params, np.stack(full), cfg_model,
                         adapters=adapters).reshape(-1, obs.shape[1])]
        preds += [M.apply(params, block, cfg_model, adapters=adapters)
                  for block in blocks[len(full):]]
    else:
        preds = [M.apply(params, block, cfg_model, adapters=adapters)
                 for block in blocks]
    pred = np.concatenate(preds, axis=0)
    return float(((pred - theta) ** 2).sum() / obs.shape[0])


def _stein_graph_total(tape, weights, obs: np.ndarray, sigma: float,
                       cfg_model: M.ModelConfig, mode: str, h: float,
                       probes: np.ndarray | None) -> ad.Tensor:
    """Taped total (unnormalised) label-free loss for one sub-sequence."""
    d_const = tape.constant(obs)
    t_out = M.forward_graph(tape, d_const, weights, cfg_model)
    quad = ad.sum_sq(t_out)
    cross = ad.scale(ad.dot(d_const, t_out), -2.0)
    div = M.divergence_sum_graph(tape, weights, obs, cfg_model, mode, h, probes)
    return ad.add(ad.add(quad, cross), ad.scale(div, 2.0 * sigma ** 2))


# ---------------------------------------------------------------------------
# label-free optimisation loops
# ---------------------------------------------------------------------------

def _stein_training_batches(obs: np.ndarray, cfg: FinetuneConfig):
    if obs.shape[0] <= cfg.full_batch_limit:
        return [obs]
    return _chunk_rows(obs, cfg.minibatch)


def _run_stein_loop(params: M.ModelParams, cfg_model: M.ModelConfig,
                    obs: np.ndarray, sigma: float, cfg: FinetuneConfig,
                    rng: np.random.Generator,
                    adapters: M.LoraAdapters | None,
                    train_base: bool) -> TrainReport:
    """Shared epoch loop: optimises adapters (finetune) or the base weights
    (from scratch) on the label-free loss.  Mutates its targets in place."""
    batches = _stein_training_batches(obs, cfg)
    trainable_adapters = adapters is not None
    state = ad.AdamState(lr=cfg.lr)
    losses: list[float] = []
    step_ms: list[float] = []
    t_start = time.perf_counter()
    for _ in range(cfg.epochs):
        for block in batches:
            t0 = time.perf_counter()
            tape = ad.Tape()
            weights = M.wrap_weights(tape, params, trainable=train_base,
                                     adapters=adapters,
                                     adapters_trainable=trainable_adapters,
                                     lora_scale=cfg.lora.scale)
            probes = None
            if cfg.divergence == "hutchinson":
                probes = M.rademacher_probes(block.shape, cfg.n_probes, rng)
            try:
                total = _stein_graph_total(tape, weights, block, sigma, cfg_model,
                                           cfg.divergence, cfg.fd_step, probes)
            except ad.NumericalError as exc:
                raise ad.NumericalError(
                    f"training diverged at step {len(losses)} "
                    f"(lr={cfg.lr}): {exc}") from exc
            loss = ad.scale(total, 1.0 / block.shape[0])
            grads = ad.backward(tape, loss)
            ad.clip_grads_to_norm(grads, cfg.clip_norm)
            if train_base:
                ad.adam_step(params, grads, state)
            else:
                flat = {}
                for name, (b_arr, a_arr) in adapters.items():
                    flat[f"lora/{name}/B"] = b_arr
                    flat[f"lora/{name}/A"] = a_arr
                ad.adam_step(flat, {k: grads[k] for k in flat}, state)
            losses.append(float(loss.value))
            step_ms.append((time.perf_counter() - t0) * 1000.0)
    target = params if train_base else {
        f"lora/{n}/{f}": arr
        for n, (b_arr, a_arr) in adapters.items()
        for f, arr in (("B", b_arr), ("A", a_arr))
    }
    return TrainReport(
        losses=losses, step_wall_ms=step_ms,
        wall_seconds=time.perf_counter() - t_start,
        checksum=params_checksum(target),
        config={"finetune": _cfg_dict(cfg), "model": cfg_model.to_dict(),
                "n_obs": int(obs.shape[0]), "sigma": sigma,
                "trains": "base" if train_base else "adapters"},
    )


def _cfg_dict(cfg: FinetuneConfig) -> dict:
    d = asdict(cfg)
    d["lora"] = {"rank": cfg.lora.rank, "targets": cfg.lora.targets,
                 "init_std": cfg.lora.init_std, "scale": cfg.lora.scale}
    return d


def finetune(params: M.ModelParams, cfg_model: M.ModelConfig, obs: np.ndarray,
             sigma: float, cfg: FinetuneConfig, rng: np.random.Generator
             ) -> tuple[M.LoraAdapters, TrainReport]:
    """Label-free adapter training on a single unlabeled dataset.

    The base weights are frozen; only the low-rank factors move.  Runs
    full-batch epochs for datasets up to ``full_batch_limit`` tokens, else
    consecutive minibatch sub-sequences.
    """
    obs = np.asarray(obs, dtype=float)
    if obs.ndim != 2 or obs.shape[1] != cfg_model.p:
        raise ValueError(f"observations must be (n, {cfg_model.p})")
    adapters = M.init_adapters(cfg_model, cfg.lora, rng)
    report = _run_stein_loop(params, cfg_model, obs, sigma, cfg, rng,
                             adapters=adapters, train_base=False)
    return adapters, report


def train_from_scratch(cfg_model: M.ModelConfig, obs: np.ndarray, sigma: float,
                       cfg: FinetuneConfig, rng: np.random.Generator
                       ) -> tuple[M.ModelParams, TrainReport]:
    """Label-free training of a freshly initialised network (no pretraining,
    no adapters); the baseline that shows what the observations alone buy."""
    obs = np.asarray(obs, dtype=float)
    if obs.ndim != 2 or obs.shape[1] != cfg_model.p:
        raise ValueError(f"observations must be (n, {cfg_model.p})")
    params = M.init_params(cfg_model, rng)
    report = _run_stein_loop(params, cfg_model, obs, sigma, cfg, rng,
                             adapters=None, train_base=True)
    return params, report
