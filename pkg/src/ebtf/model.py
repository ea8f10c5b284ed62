"""The sequence-to-sequence estimator network.

Each token is one noisy observation vector; the network maps a whole batch of
observations to denoised parameter estimates, sharing information across
tokens through multi-head self-attention.  There is deliberately no
positional encoding: the map must be permutation-equivariant, because the
tokens are exchangeable draws, and the tests enforce this.

Pipeline (per forward pass):

    tokens (n, p)
      -> per-token embedding MLP (ReLU)            -> (n, p_emb)
      -> CenterNorm (mean-centering + gain/offset, no variance division)
      -> radial clipping of each row to a ball of radius ``clip_radius``
      -> encoder blocks: multi-head self-attention, head concat, learned
         mixing matrix, residual junction, closing CenterNorm
      -> per-token output-head MLP (ReLU)          -> (n, p)

CenterNorm keeps the gain/offset of LayerNorm but skips dividing by the row
standard deviation, and the radial clip rescales any embedding row longer
than the clip radius back onto the sphere; together they bound how much a
single token can stretch the map while keeping it smooth almost everywhere.

Low-rank adapters (``W = W0 + B @ A``) can be attached to any 2-D weight;
the default target set is every embedding and output-head matrix, leaving
attention frozen.  ``B`` starts at zero so a freshly adapted model is
exactly the base model.

Divergence of the map (the trace of each token's own-block Jacobian) is
estimated purely from extra forward passes -- either exhaustively over
coordinates (exact, expensive) or with Rademacher probes (cheap, unbiased) --
so that the training loss built on it needs only first-order reverse mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, Tape


ModelParams = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.  ``p`` is the per-token dimension."""

    p: int = 1
    p_emb: int = 32
    n_heads: int = 8
    emb_depth: int = 2      # hidden ReLU layers in the embedding MLP
    emb_width: int = 32
    oh_depth: int = 8       # hidden ReLU layers in the output head
    oh_width: int = 40
    n_encoder_blocks: int = 1
    clip_radius: float = 10.0

    def __post_init__(self):
        for name in ("p", "p_emb", "n_heads", "emb_width", "oh_width", "n_encoder_blocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.emb_depth < 0 or self.oh_depth < 0:
            raise ValueError("depths must be >= 0")
        if self.p_emb % self.n_heads != 0:
            raise ValueError(
                f"p_emb ({self.p_emb}) must be divisible by n_heads ({self.n_heads})")
        if not self.clip_radius > 0:
            raise ValueError("clip_radius must be positive")

    @property
    def p_key(self) -> int:
        return self.p_emb // self.n_heads

    @property
    def p_val(self) -> int:
        return self.p_emb // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _mlp_shapes(d_in: int, width: int, depth: int, d_out: int):
    """Weight shapes (out, in) for an MLP with ``depth`` hidden ReLU layers."""
    shapes = []
    if depth == 0:
        shapes.append((d_out, d_in))
    else:
        shapes.append((width, d_in))
        for _ in range(depth - 1):
            shapes.append((width, width))
        shapes.append((d_out, width))
    return shapes


def _mlp_names(prefix: str, n_layers: int):
    return [f"{prefix}/w{i}" for i in range(n_layers)], [f"{prefix}/b{i}" for i in range(n_layers)]


def iter_param_shapes(cfg: ModelConfig):
    """Yield (name, shape) for every parameter, in canonical order."""
    emb_shapes = _mlp_shapes(cfg.p, cfg.emb_width, cfg.emb_depth, cfg.p_emb)
    wnames, bnames = _mlp_names("emb", len(emb_shapes))
    for (wn, bn, sh) in zip(wnames, bnames, emb_shapes):
        yield wn, sh
        yield bn, (sh[0],)
    yield "cn0/gain", (cfg.p_emb,)
    yield "cn0/offset", (cfg.p_emb,)
    for k in range(cfg.n_encoder_blocks):
        for j in range(cfg.n_heads):
            yield f"block{k}/head{j}/wq", (cfg.p_emb, cfg.p_key)
            yield f"block{k}/head{j}/wk", (cfg.p_emb, cfg.p_key)
            yield f"block{k}/head{j}/wv", (cfg.p_emb, cfg.p_val)
        yield f"block{k}/mix/w", (cfg.p_emb, cfg.n_heads * cfg.p_val)
        yield f"block{k}/mix/b", (cfg.p_emb,)
        yield f"block{k}/cn/gain", (cfg.p_emb,)
        yield f"block{k}/cn/offset", (cfg.p_emb,)
    oh_shapes = _mlp_shapes(cfg.p_emb, cfg.oh_width, cfg.oh_depth, cfg.p)
    wnames, bnames = _mlp_names("oh", len(oh_shapes))
    for (wn, bn, sh) in zip(wnames, bnames, oh_shapes):
        yield wn, sh
        yield bn, (sh[0],)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Framework-default-style init: U(+-1/sqrt(fan_in)) weights and biases,
    unit gains and zero offsets for the normalisation layers."""
    params: ModelParams = {}
    fan_in_of_bias: dict[str, int] = {}
    for name, shape in iter_param_shapes(cfg):
        if len(shape) == 2:
            # attention projections are stored (in, out); everything else (out, in)
            fan_in = shape[0] if "/head" in name else shape[1]
            fan_in_of_bias[name.replace("/w", "/b", 1) if "/w" in name else name] = fan_in
            params[name] = rng.uniform(-1, 1, size=shape) / math.sqrt(fan_in)
        elif name.endswith("/gain"):
            params[name] = np.ones(shape)
        elif name.endswith("/offset"):
            params[name] = np.zeros(shape)
        else:  # bias: pair it with the weight that produced the same features
            fan_in = fan_in_of_bias.get(name.replace("/b", "/w", 1), shape[0])
            params[name] = rng.uniform(-1, 1, size=shape) / math.sqrt(fan_in)
    return params


def param_count(cfg: ModelConfig, lora: "LoraConfig | None" = None) -> "ParamCount":
    """Total parameter count and, if ``lora`` is given, how many entries the
    adapters would train (rank * (d_out + d_in) per targeted matrix)."""
    total = 0
    shapes = dict(iter_param_shapes(cfg))
    for shape in shapes.values():
        total += int(np.prod(shape))
    if lora is None:
        return ParamCount(total=total, trainable=total)
    trainable = 0
    for name in resolve_lora_targets(cfg, lora):
        m, n = shapes[name]
        trainable += lora.rank * (m + n)
    return ParamCount(total=total, trainable=trainable)


@dataclass(frozen=True)
class ParamCount:
    total: int
    trainable: int


# ---------------------------------------------------------------------------
# low-rank adapters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LoraConfig:
    """Adapter settings.  ``targets`` of None selects every 2-D weight in the
    embedding block and output head (attention stays frozen)."""

    rank: int = 8
    targets: tuple[str, ...] | None = None
    init_std: float = 0.02
    scale: float = 1.0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")


LoraAdapters = dict[str, tuple[np.ndarray, np.ndarray]]   # name -> (B, A)


def resolve_lora_targets(cfg: ModelConfig, lora: LoraConfig) -> tuple[str, ...]:
    shapes = dict(iter_param_shapes(cfg))
    if lora.targets is not None:
        for t in lora.targets:
            if t not in shapes:
                raise KeyError(f"adapter target {t!r} is not a model parameter")
            if len(shapes[t]) != 2:
                raise ValueError(f"adapter target {t!r} is not a matrix")
        return tuple(lora.targets)
    return tuple(
        name for name, shape in shapes.items()
        if len(shape) == 2 and (name.startswith("emb/") or name.startswith("oh/"))
    )


def init_adapters(cfg: ModelConfig, lora: LoraConfig, rng: np.random.Generator) -> LoraAdapters:
    """B starts at zero so the adapted model initially equals the base model;
    A gets small Gaussian entries."""
    adapters: LoraAdapters = {}
    shapes = dict(iter_param_shapes(cfg))
    for name in resolve_lora_targets(cfg, lora):
        m, n = shapes[name]
        b = np.zeros((m, lora.rank))
        a = rng.normal(0.0, lora.init_std, size=(lora.rank, n))
        adapters[name] = (b, a)
    return adapters


def merge_adapters(params: ModelParams, adapters: LoraAdapters,
                   scale: float = 1.0) -> ModelParams:
    """Fold adapters into a plain weight dict (for inference / export)."""
    merged = {k: v.copy() for k, v in params.items()}
    for name, (b, a) in adapters.items():
        if name not in merged:
            raise KeyError(f"adapter targets unknown parameter {name!r}")
        merged[name] = merged[name] + scale * (b @ a)
    return merged


# ---------------------------------------------------------------------------
# forward graph
# ---------------------------------------------------------------------------

def wrap_weights(tape: Tape, params: ModelParams, *, trainable: bool,
                 adapters: LoraAdapters | None = None,
                 adapters_trainable: bool = False,
                 lora_scale: float = 1.0) -> dict[str, Tensor]:
    """Register weights on a tape, optionally composing low-rank adapters.

    Base weights become tape parameters when ``trainable`` else constants;
    adapter factors likewise via ``adapters_trainable``.  The returned dict
    holds the *effective* weight tensors used by the forward graph.
    """
    weights: dict[str, Tensor] = {}
    for name, value in params.items():
        base = tape.param(name, value) if trainable else tape.constant(value)
        if adapters and name in adapters:
            b_np, a_np = adapters[name]
            if adapters_trainable:
                b = tape.param(f"lora/{name}/B", b_np)
                a = tape.param(f"lora/{name}/A", a_np)
            else:
                b = tape.constant(b_np)
                a = tape.constant(a_np)
            delta = ad.matmul(b, a)
            if lora_scale != 1.0:
                delta = ad.scale(delta, lora_scale)
            base = ad.add(base, delta)
        weights[name] = base
    return weights


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add_bias(ad.matmul(x, ad.transpose_last(w)), b)


def _mlp(x: Tensor, weights: dict[str, Tensor], prefix: str, n_layers: int) -> Tensor:
    h = x
    for i in range(n_layers):
        h = _affine(h, weights[f"{prefix}/w{i}"], weights[f"{prefix}/b{i}"])
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def _center_norm(x: Tensor, gain: Tensor, offset: Tensor) -> Tensor:
    return ad.add_bias(ad.mul_cols(ad.center_rows(x), gain), offset)


def _n_layers(depth: int) -> int:
    return 1 if depth == 0 else depth + 1


def forward_graph(tape: Tape, obs: Tensor, weights: dict[str, Tensor],
                  cfg: ModelConfig) -> Tensor:
    """Build the full estimator graph.  ``obs`` is (..., n, p); broadcasting
    over leading axes lets one graph evaluate a whole stack of sequences."""
    h = _mlp(obs, weights, "emb", _n_layers(cfg.emb_depth))
    h = _center_norm(h, weights["cn0/gain"], weights["cn0/offset"])
    h = ad.clip_rows_to_ball(h, cfg.clip_radius)
    inv_sqrt = 1.0 / math.sqrt(cfg.p_key)
    for k in range(cfg.n_encoder_blocks):
        heads = []
        for j in range(cfg.n_heads):
            q = ad.matmul(h, weights[f"block{k}/head{j}/wq"])
            key = ad.matmul(h, weights[f"block{k}/head{j}/wk"])
            v = ad.matmul(h, weights[f"block{k}/head{j}/wv"])
            logits = ad.scale(ad.matmul(q, ad.transpose_last(key)), inv_sqrt)
            omega = ad.softmax_rows(logits)
            heads.append(ad.matmul(omega, v))
        cat = ad.concat_cols(heads)
        mixed = _affine(cat, weights[f"block{k}/mix/w"], weights[f"block{k}/mix/b"])
        h = ad.add(h, mixed)
        h = _center_norm(h, weights[f"block{k}/cn/gain"], weights[f"block{k}/cn/offset"])
    return _mlp(h, weights, "oh", _n_layers(cfg.oh_depth))


def apply(params: ModelParams, obs: np.ndarray, cfg: ModelConfig,
          adapters: LoraAdapters | None = None,
          chunk: int | None = None) -> np.ndarray:
    """Inference: map observations (n, p) or a stack (..., n, p) to estimates.

    ``chunk`` splits the token axis into independent sub-sequences of at most
    that many tokens (each chunk only attends within itself); useful when a
    huge evaluation set would make the n x n attention matrix unaffordable.
    """
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim < 2 or obs.shape[-1] != cfg.p:
        raise ad.ShapeError(f"observations must be (..., n, {cfg.p}), got {obs.shape}")
    eff = merge_adapters(params, adapters) if adapters else params
    if chunk is not None and obs.shape[-2] > chunk:
        n = obs.shape[-2]
        pieces = [
            apply(eff, obs[..., i:min(i + chunk, n), :], cfg)
            for i in range(0, n, chunk)
        ]
        return np.concatenate(pieces, axis=-2)
    tape = Tape()
    weights = wrap_weights(tape, eff, trainable=False)
    out = forward_graph(tape, tape.constant(obs), weights, cfg)
    return out.value


# spec-level views of the individual stages -------------------------------

def embed(obs: np.ndarray, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """Per-token embedding MLP only: (..., n, p) -> (..., n, p_emb)."""
    tape = Tape()
    weights = wrap_weights(tape, params, trainable=False)
    return _mlp(tape.constant(np.asarray(obs, dtype=float)), weights, "emb",
                _n_layers(cfg.emb_depth)).value


def center_norm(x: np.ndarray, gain: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """Row mean-centering followed by elementwise gain and offset."""
    tape = Tape()
    return _center_norm(tape.constant(x), tape.constant(gain), tape.constant(offset)).value


def radical_clip(x: np.ndarray, radius: float) -> np.ndarray:
    """Rescale each row with norm > radius back onto the radius sphere."""
    tape = Tape()
    return ad.clip_rows_to_ball(tape.constant(x), radius).value


def attention_forward(emb_rows: np.ndarray, params: ModelParams, cfg: ModelConfig,
                      block: int = 0) -> np.ndarray:
    """Multi-head attention on embedded rows: (..., n, p_emb) ->
    (..., n, n_heads * p_val), heads concatenated (before mixing/residual)."""
    tape = Tape()
    weights = wrap_weights(tape, params, trainable=False)
    h = tape.constant(np.asarray(emb_rows, dtype=float))
    inv_sqrt = 1.0 / math.sqrt(cfg.p_key)
    heads = []
    for j in range(cfg.n_heads):
        q = ad.matmul(h, weights[f"block{block}/head{j}/wq"])
        key = ad.matmul(h, weights[f"block{block}/head{j}/wk"])
        v = ad.matmul(h, weights[f"block{block}/head{j}/wv"])
        omega = ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose_last(key)), inv_sqrt))
        heads.append(ad.matmul(omega, v))
    return ad.concat_cols(heads).value


def attention_weights(emb_rows: np.ndarray, params: ModelParams, cfg: ModelConfig,
                      block: int = 0) -> list[np.ndarray]:
    """The per-head attention matrices (rows sum to one)."""
    tape = Tape()
    weights = wrap_weights(tape, params, trainable=False)
    h = tape.constant(np.asarray(emb_rows, dtype=float))
    inv_sqrt = 1.0 / math.sqrt(cfg.p_key)
    out = []
    for j in range(cfg.n_heads):
        q = ad.matmul(h, weights[f"block{block}/head{j}/wq"])
        key = ad.matmul(h, weights[f"block{block}/head{j}/wk"])
        out.append(ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose_last(key)), inv_sqrt)).value)
    return out


# ---------------------------------------------------------------------------
# divergence backends (built from forward passes only)
# ---------------------------------------------------------------------------

def _exact_stack_and_mask(obs: np.ndarray, h: float):
    """Perturbation stack for exhaustive coordinate probing.

    Row 2j is obs + h on coordinate j, row 2j+1 is obs - h, where j runs over
    the flattened (token, feature) coordinates.  The mask contracts the
    stacked outputs to the summed divergence: sum_j (T_+ - T_-)[j]/(2h).
    """
    n, p = obs.shape
    m = n * p
    eye = np.eye(m).reshape(m, n, p)
    stack = np.empty((2 * m, n, p))
    stack[0::2] = obs + h * eye
    stack[1::2] = obs - h * eye
    mask = np.empty((2 * m, n, p))
    mask[0::2] = eye / (2.0 * h)
    mask[1::2] = -eye / (2.0 * h)
    return stack, mask


def _hutchinson_stack_and_mask(obs: np.ndarray, h: float, probes: np.ndarray):
    """Perturbation stack for Rademacher probing: rows alternate obs +- h*eps."""
    q = probes.shape[0]
    stack = np.empty((2 * q,) + obs.shape)
    stack[0::2] = obs[None] + h * probes
    stack[1::2] = obs[None] - h * probes
    mask = np.empty_like(stack)
    mask[0::2] = probes / (2.0 * h * q)
    mask[1::2] = -probes / (2.0 * h * q)
    return stack, mask


def divergence_sum_graph(tape: Tape, weights: dict[str, Tensor], obs: np.ndarray,
                         cfg: ModelConfig, mode: str, h: float = 1e-4,
                         probes: np.ndarray | None = None) -> Tensor:
    """Taped scalar equal to (an estimate of) sum_i sum_k dT_i^(k)/dd_i^(k).

    Because the estimate is a linear functional of extra forward passes,
    reverse mode through this node yields exact parameter gradients of the
    estimate itself.
    """
    if mode == "exact":
        stack, mask = _exact_stack_and_mask(obs, h)
    elif mode == "hutchinson":
        if probes is None:
            raise ValueError("hutchinson mode needs probe vectors")
        stack, mask = _hutchinson_stack_and_mask(obs, h, probes)
    else:
        raise ValueError(f"unknown divergence mode {mode!r}")
    out = forward_graph(tape, tape.constant(stack), weights, cfg)
    return ad.dot(tape.constant(mask), out)


def rademacher_probes(shape: tuple[int, ...], n_probes: int,
                      rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 2, size=(n_probes,) + shape).astype(float) * 2.0 - 1.0


def divergence_exact(params: ModelParams, obs: np.ndarray, cfg: ModelConfig,
                     adapters: LoraAdapters | None = None, h: float = 1e-4,
                     batch: int = 128) -> np.ndarray:
    """Per-token divergence by central differences over every coordinate.

    Cost: 2*n*p forward passes over the full sequence, evaluated in stacked
    mini-batches.  Intended for tests and small-scale evaluation.
    """
    obs = np.asarray(obs, dtype=float)
    n, p = obs.shape
    eff = merge_adapters(params, adapters) if adapters else params
    m = n * p
    div = np.zeros(m)
    coords = np.arange(m)
    for start in range(0, m, batch):
        sel = coords[start:start + batch]
        eye = np.zeros((sel.size, n, p))
        eye.reshape(sel.size, m)[np.arange(sel.size), sel] = 1.0
        plus = apply(eff, obs[None] + h * eye, cfg)
        minus = apply(eff, obs[None] - h * eye, cfg)
        diff = (plus - minus).reshape(sel.size, m) / (2.0 * h)
        div[sel] = diff[np.arange(sel.size), sel]
    return div.reshape(n, p).sum(axis=1)


def divergence_exact_stacked(params: ModelParams, stack: np.ndarray,
                             cfg: ModelConfig,
                             adapters: LoraAdapters | None = None,
                             h: float = 1e-4, seq_batch: int = 2048) -> np.ndarray:
    """Central-difference divergence for a (k, n, p) stack of independent
    sequences, perturbing the same coordinate of every sequence at once.

    Same numbers as calling :func:`divergence_exact` per sequence, but the
    forward passes are k-way batched, which is what makes full-dataset
    evaluation affordable when the dataset is split into many short chunks.
    """
    stack = np.asarray(stack, dtype=float)
    if stack.ndim != 3:
        raise ad.ShapeError(f"expected (k, n, p), got {stack.shape}")
    k, n, p = stack.shape
    eff = merge_adapters(params, adapters) if adapters else params
    div = np.zeros((k, n))
    for start in range(0, k, seq_batch):
        sub = stack[start:start + seq_batch]
        for j in range(n):
            for q in range(p):
                bump = np.zeros((n, p))
                bump[j, q] = h
                both = apply(eff, np.concatenate([sub + bump, sub - bump]), cfg)
                plus, minus = both[:sub.shape[0]], both[sub.shape[0]:]
                div[start:start + seq_batch, j] += (
                    (plus[:, j, q] - minus[:, j, q]) / (2.0 * h))
    return div


def divergence_hutchinson(params: ModelParams, obs: np.ndarray, cfg: ModelConfig,
                          adapters: LoraAdapters | None = None, h: float = 1e-4,
                          n_probes: int = 1,
                          rng: np.random.Generator | None = None,
                          probes: np.ndarray | None = None) -> np.ndarray:
    """Per-token divergence via Rademacher probes: unbiased, 2 forward passes
    per probe regardless of dimension."""
    obs = np.asarray(obs, dtype=float)
    if probes is None:
        if rng is None:
            raise ValueError("pass either probes or an rng")
        probes = rademacher_probes(obs.shape, n_probes, rng)
    eff = merge_adapters(params, adapters) if adapters else params
    stack, _ = _hutchinson_stack_and_mask(obs, h, probes)
    out = apply(eff, stack, cfg)
    diff = (out[0::2] - out[1::2]) / (2.0 * h)
    return (probes * diff).sum(axis=-1).mean(axis=0)
