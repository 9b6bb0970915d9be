"""The full network: encoder -> local structures -> attention -> classifier.

``agc`` and ``gaa`` switch off the adaptive centroid updates (structures stay
at their farthest-point seeds) and the attention gate (``f_p = f_g``); they
realize the corresponding ablations.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import head, nncore
from .attention import AttentionConfig, attend, global_pool, init_attention
from .centroid import CentroidConfig, StructureSet, assemble, build_structures, init_centroid_params
from .encoder import EncoderConfig, encode, init_encoder
from .head import ClassifierConfig
from .nncore import Tensor

Array = np.ndarray


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    centroid: CentroidConfig = field(default_factory=CentroidConfig)
    reduction: int = 4
    hidden: tuple[int, ...] = (64, 64, 32)
    agc: bool = True
    gaa: bool = True

    def __post_init__(self) -> None:
        _ = (self.attention, self.classifier)

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(channels=self.encoder.feature_dim, reduction=self.reduction)

    @property
    def classifier(self) -> ClassifierConfig:
        return ClassifierConfig(in_dim=self.encoder.feature_dim, hidden=self.hidden)

    def to_dict(self) -> dict:
        return {
            "encoder_widths": list(self.encoder.widths),
            "feature_tap": self.encoder.tap,
            "structures": self.centroid.structures,
            "neighbors": self.centroid.neighbors,
            "refine_iters": self.centroid.refine_iters,
            "relative_positions": self.centroid.relative_positions,
            "reduction": self.reduction,
            "hidden": list(self.hidden),
            "agc": self.agc,
            "gaa": self.gaa,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> ModelConfig:
        return cls(
            encoder=EncoderConfig(tuple(payload["encoder_widths"]), int(payload["feature_tap"])),
            centroid=CentroidConfig(
                structures=int(payload["structures"]),
                neighbors=int(payload["neighbors"]),
                refine_iters=int(payload["refine_iters"]),
                relative_positions=bool(payload["relative_positions"]),
            ),
            reduction=int(payload["reduction"]),
            hidden=tuple(payload["hidden"]),
            agc=bool(payload["agc"]),
            gaa=bool(payload["gaa"]),
        )


@dataclass
class ForwardResult:
    logits: Tensor
    global_features: Tensor
    attention: Tensor | None
    structures: list[StructureSet]
    neighbor_history: list[list[Array]]


class PointCloudNet:
    """Parameters plus the forward pass of the incremental point-cloud classifier."""

    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        self.config = config
        self.params = nncore.ParamSet()
        rng = np.random.default_rng([seed, 0])
        init_encoder(self.params, config.encoder, rng)
        init_centroid_params(self.params, config.centroid, config.encoder.feature_dim, rng)
        init_attention(self.params, config.attention, rng)
        head.init_classifier(self.params, config.classifier, rng)

    @property
    def num_classes(self) -> int:
        return head.class_count(self.params, self.config.classifier)

    def expand_classes(self, count: int, rng: np.random.Generator) -> None:
        head.expand_classes(self.params, self.config.classifier, count, rng)

    def forward(
        self,
        clouds: Sequence[Array] | Array,
        params: Mapping[str, Tensor] | None = None,
        frozen: Sequence[Sequence[Array]] | None = None,
    ) -> ForwardResult:
        """Logits for a batch of normalized clouds.

        ``frozen[b]`` pins the neighbor choices of cloud ``b``'s centroid
        updates (as returned in ``neighbor_history``).
        """
        params = self.params if params is None else params
        cfg = self.config
        rows, structures, history = [], [], []
        for b, points in enumerate(clouds):
            features = encode(points, params, cfg.encoder)
            built, chosen = build_structures(
                points,
                features,
                cfg.centroid,
                params,
                adaptive=cfg.agc,
                frozen=None if frozen is None else frozen[b],
            )
            rows.append(assemble(built))
            structures.append(built)
            history.append(chosen)
        f_g = nncore.stack(rows, axis=0)
        if cfg.gaa:
            f_p, gate = attend(f_g, params)
        else:
            f_p, gate = f_g, None
        f_c = global_pool(f_p)
        out = head.logits(f_c, params, cfg.classifier)
        return ForwardResult(out, f_c, gate, structures, history)

    def predict_scores(
        self, clouds: Sequence[Array], batch_size: int = 64, params: Mapping[str, Tensor] | None = None
    ) -> tuple[Array, Array]:
        """Softmax scores ``[n, C]`` and global features ``[n, d]`` from a frozen snapshot."""
        snapshot = self.params.snapshot() if params is None else params
        scores, features = [], []
        for start in range(0, len(clouds), batch_size):
            result = self.forward(clouds[start : start + batch_size], params=snapshot)
            scores.append(nncore.softmax(result.logits).data)
            features.append(result.global_features.data)
        if not scores:
            return np.zeros((0, self.num_classes)), np.zeros((0, self.config.encoder.feature_dim))
        return np.concatenate(scores), np.concatenate(features)
