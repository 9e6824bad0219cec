"""Projector, transformer trunk and vocabulary head with exact gradients.

The trunk runs over the concatenated sequence ``[C_v ; E[text]]`` plus learned
absolute positions from one shared table (visual rows take positions
``0..N-1``, text rows ``N..N+l-1``). Blocks are pre-norm with a GELU
feed-forward of width ``4d``. In causal mode visual rows attend only to visual
rows, and text row ``i`` attends to every visual row and to text rows ``<= i``.

Everything is plain numpy; gradients are derived by hand and checked against
central finite differences in the test suite.
"""

from __future__ import annotations

import math
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Optional, Protocol

import numpy as np
from scipy.special import erf

from diffscene.core.errors import ConfigurationError, NumericError, ShapeError, VocabularyError
from diffscene.scenegen.tasks import longest_sequence

PROJECTOR_PREFIX = "projector."
INIT_STD = 0.02
LN_EPS = 1e-5

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class AttentionMode(str, Enum):
    BIDIRECTIONAL = "bidirectional"
    CAUSAL = "causal"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture dimensions. ``d`` must be divisible by ``n_heads``."""

    vocab_size: int
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    feature_dim: int = 32
    n_patches: int = 64
    max_text_len: int = 40
    attention_mode: AttentionMode = AttentionMode.BIDIRECTIONAL
    vocab_hash: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "attention_mode", AttentionMode(self.attention_mode))
        for name in ("vocab_size", "d", "n_layers", "n_heads", "feature_dim", "n_patches"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d % self.n_heads:
            raise ConfigurationError(
                f"d={self.d} is not divisible by n_heads={self.n_heads}",
            )
        minimum = longest_sequence()
        if self.max_text_len < minimum:
            raise ConfigurationError(
                f"max_text_len={self.max_text_len} is below the longest prompt + target length {minimum}"
            )

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    def to_dict(self) -> dict:
        out = asdict(self)
        out["attention_mode"] = self.attention_mode.value
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> ModelConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"Unknown model config field(s): {', '.join(sorted(unknown))}")
        return cls(**data)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered mapping of tensor names to shapes."""
    d, ff, V = config.d, 4 * config.d, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "projector.fc1.weight": (config.feature_dim, d),
        "projector.fc1.bias": (d,),
        "projector.fc2.weight": (d, d),
        "projector.fc2.bias": (d,),
        "tok_emb": (V, d),
        "pos_emb": (config.n_patches + config.max_text_len, d),
    }
    for i in range(config.n_layers):
        pre = f"blocks.{i}."
        shapes[pre + "ln1.weight"] = (d,)
        shapes[pre + "ln1.bias"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[pre + f"attn.{proj}.weight"] = (d, d)
            shapes[pre + f"attn.{proj}.bias"] = (d,)
        shapes[pre + "ln2.weight"] = (d,)
        shapes[pre + "ln2.bias"] = (d,)
        shapes[pre + "mlp.fc1.weight"] = (d, ff)
        shapes[pre + "mlp.fc1.bias"] = (ff,)
        shapes[pre + "mlp.fc2.weight"] = (ff, d)
        shapes[pre + "mlp.fc2.bias"] = (d,)
    shapes["ln_f.weight"] = (d,)
    shapes["ln_f.bias"] = (d,)
    shapes["head.weight"] = (d, V)
    shapes["head.bias"] = (V,)
    return shapes


def _is_norm_gain(name: str) -> bool:
    return name.endswith(("ln1.weight", "ln2.weight", "ln_f.weight"))


class Params:
    """All learnable tensors of one model together with its :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, np.ndarray]) -> None:
        shapes = parameter_shapes(config)
        if set(tensors) != set(shapes):
            missing = sorted(set(shapes) - set(tensors))
            extra = sorted(set(tensors) - set(shapes))
            raise ShapeError(f"Tensor set mismatch; missing={missing} unexpected={extra}")
        for name, shape in shapes.items():
            if tuple(tensors[name].shape) != shape:
                raise ShapeError(
                    f"Tensor {name} has shape {tuple(tensors[name].shape)}, expected {shape}"
                )
        self.config = config
        self.tensors: dict[str, np.ndarray] = {name: tensors[name] for name in shapes}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["tok_emb"].dtype

    @property
    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def projector_names(self) -> list[str]:
        return [n for n in self.tensors if n.startswith(PROJECTOR_PREFIX)]

    def copy(self) -> Params:
        return Params(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> Params:
        return Params(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def replace(self, **updates: np.ndarray) -> Params:
        tensors = dict(self.tensors)
        tensors.update(updates)
        return Params(self.config, tensors)

    def with_config(self, config: ModelConfig) -> Params:
        return Params(config, self.tensors)


def init_params(config: ModelConfig, seed: int) -> Params:
    """Initialize weights ~ N(0, 0.02), biases 0 and norm gains 1, deterministically."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        elif _is_norm_gain(name):
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            tensors[name] = rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)
    return Params(config, tensors)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)``."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return cdf + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _flat(t: np.ndarray) -> np.ndarray:
    return t.reshape(-1, t.shape[-1])


def _layer_norm(x, weight, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * weight + bias, (xhat, inv)


def _layer_norm_backward(dy, weight, cache, grads: dict, prefix: str):
    xhat, inv = cache
    grads[prefix + ".weight"] = _flat(dy * xhat).sum(axis=0)
    grads[prefix + ".bias"] = _flat(dy).sum(axis=0)
    g = dy * weight
    return (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)) * inv


def _split_heads(t: np.ndarray, n_heads: int) -> np.ndarray:
    B, S, d = t.shape
    return t.reshape(B, S, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(t: np.ndarray) -> np.ndarray:
    B, h, S, dh = t.shape
    return t.transpose(0, 2, 1, 3).reshape(B, S, h * dh)


@lru_cache(maxsize=64)
def attention_mask(n_visual: int, n_text: int, mode: AttentionMode) -> np.ndarray:
    """Boolean ``(S, S)`` matrix; ``True`` where a row may attend to a column."""
    s = n_visual + n_text
    if mode is AttentionMode.BIDIRECTIONAL:
        allowed = np.ones((s, s), dtype=bool)
    else:
        allowed = np.zeros((s, s), dtype=bool)
        allowed[:, :n_visual] = True
        allowed[n_visual:, n_visual:] = np.tril(np.ones((n_text, n_text), dtype=bool))
    allowed.setflags(write=False)
    return allowed


# ---------------------------------------------------------------------------
# Projector
# ---------------------------------------------------------------------------


def _project_batch(params: Params, feats: np.ndarray):
    u = feats @ params["projector.fc1.weight"] + params["projector.fc1.bias"]
    h = gelu(u)
    cv = h @ params["projector.fc2.weight"] + params["projector.fc2.bias"]
    return cv, (feats, u, h)


def _project_backward(params: Params, cache, dcv: np.ndarray, grads: dict) -> None:
    feats, u, h = cache
    grads["projector.fc2.weight"] = _flat(h).T @ _flat(dcv)
    grads["projector.fc2.bias"] = _flat(dcv).sum(axis=0)
    du = (dcv @ params["projector.fc2.weight"].T) * _gelu_grad(u)
    grads["projector.fc1.weight"] = _flat(feats).T @ _flat(du)
    grads["projector.fc1.bias"] = _flat(du).sum(axis=0)


def _check_features(params: Params, features: np.ndarray) -> np.ndarray:
    cfg = params.config
    feats = np.asarray(features)
    if feats.ndim not in (3, 4) or feats.shape[-1] != cfg.feature_dim:
        raise ShapeError(
            f"Features of shape {feats.shape} do not end in feature_dim={cfg.feature_dim}"
        )
    g1, g2 = feats.shape[-3], feats.shape[-2]
    if g1 * g2 != cfg.n_patches:
        raise ShapeError(f"Feature grid {g1}x{g2} does not give n_patches={cfg.n_patches}")
    lead = feats.shape[:-3]
    return feats.reshape(*lead, cfg.n_patches, cfg.feature_dim).astype(params.dtype, copy=False)


def project(params: Params, features: np.ndarray) -> np.ndarray:
    """Map a ``G x G x D_v`` feature grid (optionally batched) to ``C_v`` of shape ``(G*G, d)``.

    Rows follow row-major order of the grid.
    """
    flat = _check_features(params, features)
    batched = flat.ndim == 3
    cv, _ = _project_batch(params, flat if batched else flat[None])
    return cv if batched else cv[0]


# ---------------------------------------------------------------------------
# Trunk
# ---------------------------------------------------------------------------


def _block_forward(params: Params, i: int, x: np.ndarray, allowed: np.ndarray):
    p, pre, h = params, f"blocks.{i}.", params.config.n_heads
    scale = 1.0 / math.sqrt(params.config.head_dim)

    a, ln1 = _layer_norm(x, p[pre + "ln1.weight"], p[pre + "ln1.bias"])
    q = _split_heads(a @ p[pre + "attn.q.weight"] + p[pre + "attn.q.bias"], h)
    k = _split_heads(a @ p[pre + "attn.k.weight"] + p[pre + "attn.k.bias"], h)
    v = _split_heads(a @ p[pre + "attn.v.weight"] + p[pre + "attn.v.bias"], h)
    scores = np.where(allowed, (q @ k.transpose(0, 1, 3, 2)) * scale, -np.inf)
    probs = softmax(scores)
    ctx = _merge_heads(probs @ v)
    x1 = x + ctx @ p[pre + "attn.o.weight"] + p[pre + "attn.o.bias"]

    m, ln2 = _layer_norm(x1, p[pre + "ln2.weight"], p[pre + "ln2.bias"])
    u = m @ p[pre + "mlp.fc1.weight"] + p[pre + "mlp.fc1.bias"]
    g = gelu(u)
    x2 = x1 + g @ p[pre + "mlp.fc2.weight"] + p[pre + "mlp.fc2.bias"]
    cache = {"a": a, "ln1": ln1, "q": q, "k": k, "v": v, "probs": probs, "ctx": ctx,
             "m": m, "ln2": ln2, "u": u, "g": g}
    return x2, cache


def _block_backward(params: Params, i: int, dx2: np.ndarray, c: dict, grads: dict) -> np.ndarray:
    p, pre, h = params, f"blocks.{i}.", params.config.n_heads
    scale = 1.0 / math.sqrt(params.config.head_dim)

    grads[pre + "mlp.fc2.weight"] = _flat(c["g"]).T @ _flat(dx2)
    grads[pre + "mlp.fc2.bias"] = _flat(dx2).sum(axis=0)
    du = (dx2 @ p[pre + "mlp.fc2.weight"].T) * _gelu_grad(c["u"])
    grads[pre + "mlp.fc1.weight"] = _flat(c["m"]).T @ _flat(du)
    grads[pre + "mlp.fc1.bias"] = _flat(du).sum(axis=0)
    dm = du @ p[pre + "mlp.fc1.weight"].T
    dx1 = dx2 + _layer_norm_backward(dm, p[pre + "ln2.weight"], c["ln2"], grads, pre + "ln2")

    grads[pre + "attn.o.weight"] = _flat(c["ctx"]).T @ _flat(dx1)
    grads[pre + "attn.o.bias"] = _flat(dx1).sum(axis=0)
    dctx = _split_heads(dx1 @ p[pre + "attn.o.weight"].T, h)
    probs = c["probs"]
    dprobs = dctx @ c["v"].transpose(0, 1, 3, 2)
    dv = probs.transpose(0, 1, 3, 2) @ dctx
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * scale
    dq = dscores @ c["k"]
    dk = dscores.transpose(0, 1, 3, 2) @ c["q"]

    da = np.zeros_like(c["a"])
    for name, dt in (("q", dq), ("k", dk), ("v", dv)):
        dt = _merge_heads(dt)
        grads[pre + f"attn.{name}.weight"] = _flat(c["a"]).T @ _flat(dt)
        grads[pre + f"attn.{name}.bias"] = _flat(dt).sum(axis=0)
        da += dt @ p[pre + f"attn.{name}.weight"].T
    return dx1 + _layer_norm_backward(da, p[pre + "ln1.weight"], c["ln1"], grads, pre + "ln1")


@dataclass
class _TrunkCache:
    ids: np.ndarray
    positions: np.ndarray
    n_visual: int
    blocks: list = field(default_factory=list)
    ln_f: tuple = ()
    hidden: Optional[np.ndarray] = None


def _trunk(params: Params, cv: np.ndarray, ids: np.ndarray, mode: AttentionMode):
    cfg = params.config
    n_visual, n_text = cv.shape[1], ids.shape[1]
    positions = np.concatenate([np.arange(n_visual), cfg.n_patches + np.arange(n_text)])
    x = np.concatenate([cv, params["tok_emb"][ids]], axis=1) + params["pos_emb"][positions]
    allowed = attention_mask(n_visual, n_text, mode)
    cache = _TrunkCache(ids=ids, positions=positions, n_visual=n_visual)
    for i in range(cfg.n_layers):
        x, block_cache = _block_forward(params, i, x, allowed)
        cache.blocks.append(block_cache)
    hidden, cache.ln_f = _layer_norm(x, params["ln_f.weight"], params["ln_f.bias"])
    cache.hidden = hidden
    logits = hidden[:, n_visual:] @ params["head.weight"] + params["head.bias"]
    return logits, cache


def _trunk_backward(params: Params, cache: _TrunkCache, dlogits: np.ndarray):
    """Return gradients for all trunk tensors and the gradient w.r.t. ``C_v``."""
    grads: dict[str, np.ndarray] = {}
    nv, d = cache.n_visual, params.config.d
    text_hidden = cache.hidden[:, nv:]
    grads["head.weight"] = _flat(text_hidden).T @ _flat(dlogits)
    grads["head.bias"] = _flat(dlogits).sum(axis=0)
    dh = np.zeros_like(cache.hidden)
    dh[:, nv:] = dlogits @ params["head.weight"].T
    dx = _layer_norm_backward(dh, params["ln_f.weight"], cache.ln_f, grads, "ln_f")
    for i in reversed(range(params.config.n_layers)):
        dx = _block_backward(params, i, dx, cache.blocks[i], grads)

    pos = np.zeros_like(params["pos_emb"])
    np.add.at(pos, cache.positions, dx.sum(axis=0))
    grads["pos_emb"] = pos
    tok = np.zeros_like(params["tok_emb"])
    np.add.at(tok, cache.ids.reshape(-1), dx[:, nv:].reshape(-1, d))
    grads["tok_emb"] = tok
    return grads, dx[:, :nv]


# ---------------------------------------------------------------------------
# Public forward
# ---------------------------------------------------------------------------


@dataclass
class ForwardOutput:
    """Text-position logits, plus the hidden states when requested."""

    logits: np.ndarray
    hidden: Optional[np.ndarray] = None
    text_hidden: Optional[np.ndarray] = None


def _check_ids(params: Params, text_ids) -> np.ndarray:
    cfg = params.config
    ids = np.asarray(text_ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"text_ids must be 1-d, got shape {ids.shape}")
    if len(ids) > cfg.max_text_len:
        raise ShapeError(
            f"Text length {len(ids)} exceeds max_text_len={cfg.max_text_len}",
        )
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        bad = int(ids[(ids < 0) | (ids >= cfg.vocab_size)][0])
        raise VocabularyError(f"Token id {bad} outside [0, {cfg.vocab_size})")
    return ids


def _check_cv(params: Params, C_v: Optional[np.ndarray]) -> np.ndarray:
    cfg = params.config
    if C_v is None:
        return np.zeros((0, cfg.d), dtype=params.dtype)
    cv = np.asarray(C_v, dtype=params.dtype)
    if cv.ndim != 2 or cv.shape[1] != cfg.d or cv.shape[0] not in (0, cfg.n_patches):
        raise ShapeError(f"C_v of shape {cv.shape} must be ({cfg.n_patches}, {cfg.d}) or empty")
    return cv


def forward(
    params: Params,
    C_v: Optional[np.ndarray],
    text_ids: Sequence[int] | np.ndarray,
    mode: AttentionMode | str | None = None,
    *,
    keep_hidden: bool = False,
) -> ForwardOutput:
    """Run the trunk on ``[C_v ; E[text_ids]]`` and return logits for the text rows.

    Args:
        params: Model parameters.
        C_v: Projected scene vectors ``(N, d)``; ``None`` runs text only.
        text_ids: Token ids of length ``l <= max_text_len``.
        mode: Attention mode; defaults to the config's mode.
        keep_hidden: Also return the final hidden states.

    Raises:
        VocabularyError: If an id is outside the vocabulary.
        ShapeError: On length or shape mismatches.
    """
    mode = AttentionMode(mode) if mode is not None else params.config.attention_mode
    ids = _check_ids(params, text_ids)
    cv = _check_cv(params, C_v)
    logits, cache = _trunk(params, cv[None], ids[None], mode)
    if not keep_hidden:
        return ForwardOutput(logits=logits[0])
    hidden = cache.hidden[0]
    return ForwardOutput(logits=logits[0], hidden=hidden, text_hidden=hidden[cv.shape[0]:])


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainExample:
    """One training item: prompt, fixed-length target, corruption flags and features."""

    prompt_ids: np.ndarray
    target_ids: np.ndarray
    mask_flags: np.ndarray
    t: float = 1.0
    features: Optional[np.ndarray] = None


class Objective(Protocol):
    """A training objective usable by :func:`loss_and_grads`."""

    mode: AttentionMode

    def build_input(self, example: TrainExample) -> tuple[np.ndarray, int]:
        """Return the text ids to feed and the row where target logits start."""
        ...

    def loss_and_dlogits(
        self, logits: np.ndarray, example: TrainExample
    ) -> tuple[float, np.ndarray]:
        """Per-example loss and its gradient w.r.t. the target logit rows."""
        ...


def loss_and_grads(
    params: Params,
    batch: Sequence[TrainExample],
    loss_fn: Objective,
    trainable_mask: Mapping[str, bool] | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean per-example loss over *batch* and its exact gradients.

    Examples are grouped by (text length, has features) and run as batched
    forwards in a fixed group order; per-tensor gradients are accumulated in
    float64. Tensors whose ``trainable_mask`` entry is false get no entry in
    the returned gradient mapping.

    Raises:
        ConfigurationError: If *batch* is empty.
        ShapeError: If an example is longer than ``max_text_len``.
        VocabularyError: If an example holds an id outside the vocabulary.
        NumericError: If an example's loss is not finite; carries its index.
    """
    if not batch:
        raise ConfigurationError("Cannot compute gradients of an empty batch")
    mask = {name: True for name in params} if trainable_mask is None else dict(trainable_mask)
    trainable = [name for name in params if mask.get(name, False)]
    needs_projector = any(name.startswith(PROJECTOR_PREFIX) for name in trainable)

    inputs = [loss_fn.build_input(ex) for ex in batch]
    for ids, _ in inputs:
        _check_ids(params, ids)
    groups: dict[tuple[int, bool], list[int]] = {}
    for i, (ids, _) in enumerate(inputs):
        groups.setdefault((len(ids), batch[i].features is not None), []).append(i)

    totals = {name: np.zeros(params[name].shape, dtype=np.float64) for name in trainable}
    losses = np.zeros(len(batch), dtype=np.float64)
    n = len(batch)
    for key in sorted(groups):
        idxs = groups[key]
        ids = np.stack([inputs[i][0] for i in idxs]).astype(np.int64)
        if key[1]:
            feats = np.stack([_check_features(params, batch[i].features) for i in idxs])
            cv, proj_cache = _project_batch(params, feats)
        else:
            cv = np.zeros((len(idxs), 0, params.config.d), dtype=params.dtype)
            proj_cache = None
        logits, cache = _trunk(params, cv, ids, loss_fn.mode)

        dlogits = np.zeros_like(logits)
        for j, i in enumerate(idxs):
            start, length = inputs[i][1], len(batch[i].target_ids)
            loss_i, d_i = loss_fn.loss_and_dlogits(logits[j, start : start + length], batch[i])
            if not math.isfinite(loss_i):
                raise NumericError("Non-finite loss", instance_index=i)
            losses[i] = loss_i
            dlogits[j, start : start + length] = d_i / n

        grads, dcv = _trunk_backward(params, cache, dlogits)
        if proj_cache is not None and needs_projector:
            _project_backward(params, proj_cache, dcv, grads)
        for name in trainable:
            if name in grads:
                totals[name] += grads[name]

    loss = math.fsum(losses.tolist()) / n
    return loss, {name: totals[name].astype(params[name].dtype) for name in trainable}
