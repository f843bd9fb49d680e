"""xSlot attention classifier head and the area-regularized loss.

Each category owns one slot. Slots attend over the projected backbone
features with sigmoid dot-product attention, get refined by a GRU for a
fixed number of iterations, and the class score is the (signed) sum of the
attention-weighted features. The final attention rows are the
explanations.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np

from .errors import ConfigError, DimensionError
from .nn import Params, gru_cell, init_gru, init_mlp, mlp, uniform_param
from .tensor import (
    Tensor,
    add,
    conv2d,
    exp,
    matmul,
    mul,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    softmax_cross_entropy,
    transpose,
)

MLP_DEPTH = 3
AREA_NORMS = ("sum", "mean")


@dataclass
class XSlotConfig:
    n: int = 10
    channels: int = 16
    iterations: int = 3
    e: int = 1
    lam: float = 1.0
    attention_scale: bool = False
    use_gru: bool = True
    use_pe: bool = True
    init_log_std: float = float(np.log(0.1))
    area_norm: str = "mean"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.e not in (1, -1):
            raise ConfigError(f"e must be +1 or -1, got {self.e}")
        if self.lam < 0:
            raise ConfigError(f"area-loss weight must be >= 0, got {self.lam}")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.channels < 1 or self.n < 1:
            raise ConfigError("channels and n must be >= 1")
        if self.area_norm not in AREA_NORMS:
            raise ConfigError(f"area_norm must be one of {AREA_NORMS}, got {self.area_norm!r}")
        if self.use_pe and self.channels % 4:
            raise ConfigError(f"position embedding needs channels divisible by 4, got {self.channels}")

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.channels) if self.attention_scale else 1.0


class XSlotOutput(NamedTuple):
    logits: Tensor  # b x n
    attention: Tensor  # b x n x d, final attention A^(T)
    updates: Tensor  # b x n x c', final aggregate U^(T)
    features: Tensor  # b x c' x d, projected features F'
    spatial: Tuple[int, int]  # (h, w)


def init_xslot(config: XSlotConfig, c_in: int, rng: np.random.Generator) -> Params:
    c = config.channels
    params: Params = {
        "xslot.proj.weight": uniform_param(rng, (c, c_in, 1, 1), np.sqrt(6.0 / c_in)),
        "xslot.proj.bias": Tensor(np.zeros(c), requires_grad=True),
        # one learnable initial slot per category; the spread is shared
        "xslot.slot.mu": Tensor(rng.standard_normal((config.n, c)), requires_grad=True),
        "xslot.slot.log_sigma": Tensor(np.full(c, config.init_log_std), requires_grad=True),
    }
    params.update(init_mlp(rng, [c] * (MLP_DEPTH + 1), "xslot.q"))
    params.update(init_mlp(rng, [c] * (MLP_DEPTH + 1), "xslot.k"))
    if config.use_gru:
        params.update(init_gru(rng, c, "xslot.gru"))
    return params


def project_features(features: Tensor, params: Params) -> Tensor:
    """``F' = ReLU(Conv1x1(F))`` with spatial dims flattened: b x c' x (h*w)."""
    if features.ndim != 4:
        raise DimensionError(f"expected b x c x h x w features, got {features.shape}")
    w = params["xslot.proj.weight"]
    out = conv2d(features, w)
    out = relu(add(out, reshape(params["xslot.proj.bias"], (1, -1, 1, 1))))
    b, c, h, wd = out.shape
    return reshape(out, (b, c, h * wd))


def position_embedding(h: int, w: int, channels: int) -> np.ndarray:
    """Fixed 2-D sinusoidal embedding, ``channels x (h*w)``.

    The first half of the channels encodes the row index and the second
    half the column index, each as interleaved sin/cos pairs at
    frequencies ``10000 ** (-2i / half)``.
    """
    if channels % 4:
        raise ConfigError(f"position embedding needs channels divisible by 4, got {channels}")
    half = channels // 2
    freqs = 10000.0 ** (-np.arange(0, half, 2) / half)

    def encode(pos: np.ndarray) -> np.ndarray:
        ang = pos[:, None] * freqs[None, :]
        enc = np.empty((pos.size, half))
        enc[:, 0::2] = np.sin(ang)
        enc[:, 1::2] = np.cos(ang)
        return enc

    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    pe = np.concatenate([encode(rows.reshape(-1)), encode(cols.reshape(-1))], axis=1)
    return pe.T


def attention_step(
    slots: Tensor, keys: Tensor, features: Tensor, params: Params, scale: float = 1.0
) -> Tuple[Tensor, Tensor]:
    """One attention read.

    slots: b x n x c'; keys: b x d x c' (already passed through K);
    features: projected F', b x c' x d.
    Returns (A, U) with A = sigmoid(scale * Q(slots) K^T) and U = A F'^T.
    """
    q = mlp(slots, params, "xslot.q", MLP_DEPTH)
    dots = matmul(q, transpose(keys, (0, 2, 1)))
    if scale != 1.0:
        dots = mul(dots, scale)
    attn = sigmoid(dots)
    updates = matmul(attn, transpose(features, (0, 2, 1)))
    return attn, updates


def initial_slots(config: XSlotConfig, params: Params, batch: int, training: bool,
                  rng: Optional[np.random.Generator]) -> Tensor:
    mu = params["xslot.slot.mu"]
    if mu.shape != (config.n, config.channels):
        raise ConfigError(f"slot mean has shape {mu.shape}, config wants {(config.n, config.channels)}")
    base = add(reshape(mu, (1, config.n, config.channels)), np.zeros((batch, 1, 1), dtype=mu.dtype))
    if not training:
        return base
    if rng is None:
        raise ConfigError("training-mode slot sampling needs an rng")
    noise = rng.standard_normal((batch, config.n, config.channels)).astype(mu.dtype)
    return add(base, mul(exp(params["xslot.slot.log_sigma"]), noise))


def xslot_forward(features: Tensor, config: XSlotConfig, params: Params, training: bool = False,
                  rng: Optional[np.random.Generator] = None) -> XSlotOutput:
    if features.ndim != 4:
        raise DimensionError(f"expected b x c x h x w features, got {features.shape}")
    if params["xslot.proj.weight"].shape[1] != features.shape[1]:
        raise ConfigError(
            f"projection expects {params['xslot.proj.weight'].shape[1]} channels, features have {features.shape[1]}"
        )
    if config.use_gru and "xslot.gru.w_z" not in params:
        raise ConfigError("config enables the GRU but params have none")
    b, _, h, w = features.shape
    c = config.channels
    n = config.n

    fp = project_features(features, params)
    fp_t = transpose(fp, (0, 2, 1))  # b x d x c'
    ft = add(fp_t, position_embedding(h, w, c).T.astype(fp.dtype)) if config.use_pe else fp_t
    keys = mlp(ft, params, "xslot.k", MLP_DEPTH)

    slots = initial_slots(config, params, b, training, rng)
    for _ in range(config.iterations):
        _, updates = attention_step(slots, keys, fp, params, config.scale)
        if config.use_gru:
            slots = reshape(
                gru_cell(reshape(updates, (b * n, c)), reshape(slots, (b * n, c)), params, "xslot.gru"),
                (b, n, c),
            )
        else:
            slots = mul(add(updates, slots), 0.5)
    attn, updates = attention_step(slots, keys, fp, params, config.scale)
    logits = reduce_sum(updates, axes=2)
    if config.e == -1:
        logits = mul(logits, -1.0)
    return XSlotOutput(logits, attn, updates, fp, (h, w))


def area_term(attention: Tensor, norm: str = "sum") -> Tensor:
    """Sum of all attention entries per sample, averaged over the batch.

    ``norm="mean"`` additionally divides by the n*d entries of one map.
    """
    b = attention.shape[0]
    scale = 1.0 / b
    if norm == "mean":
        scale /= attention.size // b
    elif norm != "sum":
        raise ConfigError(f"area_norm must be one of {AREA_NORMS}, got {norm!r}")
    return mul(reduce_sum(attention), scale)


def scouter_loss(output: XSlotOutput, labels, lam: float, norm: str = "sum") -> Tuple[Tensor, Tensor, Tensor]:
    """Cross-entropy on the slot logits plus ``lam`` times the area term.

    Returns ``(total, cross_entropy, area)``.
    """
    if lam < 0:
        raise ConfigError(f"area-loss weight must be >= 0, got {lam}")
    ce = softmax_cross_entropy(output.logits, labels)
    area = area_term(output.attention, norm)
    total = add(ce, mul(area, float(lam))) if lam else ce
    return total, ce, area
