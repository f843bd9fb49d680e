"""Backbone + classifier head bundled with its parameters and buffers."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, NamedTuple, Optional

import numpy as np

from .backbone import BackboneConfig, Buffers, backbone_forward, fc_head_forward, init_backbone, init_fc_head
from .errors import ConfigError
from .nn import Params
from .tensor import Tensor, no_grad
from .xslot import XSlotConfig, XSlotOutput, init_xslot, scouter_loss, xslot_forward
from .tensor import softmax_cross_entropy

HEADS = ("fc", "scouter")


@dataclass
class ModelConfig:
    head: str = "scouter"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    xslot: XSlotConfig = field(default_factory=XSlotConfig)

    def __post_init__(self):
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")

    @property
    def n_classes(self) -> int:
        return self.xslot.n

    def to_dict(self) -> dict:
        return {"head": self.head, "backbone": asdict(self.backbone), "xslot": asdict(self.xslot)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            head=d.get("head", "scouter"),
            backbone=BackboneConfig(**d.get("backbone", {})),
            xslot=XSlotConfig(**d.get("xslot", {})),
        )


class Forward(NamedTuple):
    logits: Tensor
    features: Tensor
    xslot: Optional[XSlotOutput]


class Classifier:
    """Parameters are drawn from independent per-stage streams so the backbone
    initialization does not depend on which head is attached."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: Params = {}
        self.buffers: Buffers = {}
        backbone_params, self.buffers = init_backbone(config.backbone, np.random.default_rng([seed, 0]))
        self.params.update(backbone_params)
        head_rng = np.random.default_rng([seed, 1])
        if config.head == "fc":
            self.params.update(init_fc_head(config.backbone.c, config.n_classes, head_rng))
        else:
            self.params.update(init_xslot(config.xslot, config.backbone.c, head_rng))

    @property
    def is_scouter(self) -> bool:
        return self.config.head == "scouter"

    def parameter_count(self, head_only: bool = False) -> int:
        return sum(t.size for k, t in self.params.items() if not (head_only and k.startswith("backbone.")))

    def forward(self, images, training: bool = False, rng: Optional[np.random.Generator] = None) -> Forward:
        images = images if isinstance(images, Tensor) else Tensor(images)
        feats = backbone_forward(images, self.config.backbone, self.params, self.buffers, training)
        if self.config.head == "fc":
            return Forward(fc_head_forward(feats, self.params), feats, None)
        out = xslot_forward(feats, self.config.xslot, self.params, training, rng)
        return Forward(out.logits, feats, out)

    def loss(self, fwd: Forward, labels, lam: Optional[float] = None):
        """Returns ``(total, cross_entropy, area)``; area is ``None`` for the fc head."""
        if fwd.xslot is None:
            ce = softmax_cross_entropy(fwd.logits, labels)
            return ce, ce, None
        xs = self.config.xslot
        return scouter_loss(fwd.xslot, labels, xs.lam if lam is None else lam, xs.area_norm)

    def predict_logits(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        outs = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                outs.append(self.forward(images[i:i + batch_size]).logits.data)
        return np.concatenate(outs)

    def predict_proba(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        logits = self.predict_logits(images, batch_size).astype(np.float64)
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def attention(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Final attention maps, ``N x n x h x w``, eval mode."""
        if not self.is_scouter:
            raise ConfigError("attention maps exist only for the scouter head")
        outs = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                xo = self.forward(images[i:i + batch_size]).xslot
                h, w = xo.spatial
                outs.append(xo.attention.data.reshape(xo.attention.shape[0], -1, h, w))
        return np.concatenate(outs)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        state = {f"param:{k}": v.data for k, v in self.params.items()}
        state.update({f"buffer:{k}": v for k, v in self.buffers.items()})
        return state
