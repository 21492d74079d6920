"""Run configuration, dataset presets and ablation switches."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .augment import DebiasConfig
from .model import LossWeights, ModelConfig


@dataclass
class RunConfig:
    """Everything a training or evaluation run needs, flat for CLI mapping."""

    manifest: str = ""
    embeddings: str = ""
    dim: int = 64
    proj_layers: int = 2
    proj_hidden: int = 64
    fusion_layers: int = 1
    fusion_hidden: int = 64
    comp_weight: float = 0.9
    dis_weight: float = 10.0
    rec_weight: float = 10.0
    pair_weight: float = 0.9
    cart_weight: float = 0.1
    fusion_mix: float = 0.8
    score_blend: float = 0.5
    debias_strength: float = 0.5
    debias_blend: float = 0.8
    temperature: float = 0.01
    lr: float = 5e-4
    epochs: int = 20
    batch_size: int = 128
    seed: int = 0
    threads: int = 1
    pseudo_context: bool = False
    pseudo_context_scale: float = 1.0
    comp_candidates: str = "full"
    cartesian_candidates: str = "batch"

    def __post_init__(self):
        if self.dim < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("dim/epochs/batch_size out of range")
        if self.lr < 0 or self.threads < 1:
            raise ValueError("lr must be >= 0 and threads >= 1")
        # range checks for the blend/weight fields live in the typed configs
        self.loss_weights()
        self.model_config()
        self.debias_config()

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.comp_weight, self.dis_weight, self.rec_weight,
                           self.pair_weight, self.cart_weight, self.score_blend)

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.dim, self.proj_layers, self.proj_hidden,
                           self.fusion_layers, self.fusion_hidden, self.fusion_mix,
                           self.temperature, self.pseudo_context,
                           self.pseudo_context_scale,
                           self.comp_candidates, self.cartesian_candidates)

    def debias_config(self) -> DebiasConfig:
        return DebiasConfig(self.debias_strength, self.debias_blend)


# Hyperparameter presets per benchmark; "synthetic" targets the desk-scale
# generated task and mirrors the ut-zappos loss balance at small dimensions.
PRESETS: dict[str, dict] = {
    "mit-states": dict(comp_weight=0.3, dis_weight=10.0, rec_weight=100.0,
                       pair_weight=0.7, cart_weight=0.1, fusion_mix=0.8,
                       score_blend=0.5, debias_strength=0.5, debias_blend=0.9,
                       temperature=0.01, epochs=50, batch_size=128,
                       dim=1024, proj_layers=2, fusion_layers=3),
    "ut-zappos": dict(comp_weight=0.9, dis_weight=10.0, rec_weight=10.0,
                      pair_weight=0.9, cart_weight=0.1, fusion_mix=0.8,
                      score_blend=0.5, debias_strength=0.5, debias_blend=0.8,
                      temperature=0.01, epochs=20, batch_size=128,
                      dim=1024, proj_layers=2, fusion_layers=1),
    "cgqa": dict(comp_weight=0.2, dis_weight=3.0, rec_weight=1.0,
                 pair_weight=0.1, cart_weight=0.1, fusion_mix=0.9,
                 score_blend=0.5, debias_strength=0.5, debias_blend=0.9,
                 temperature=0.01, epochs=20, batch_size=32,
                 dim=1024, proj_layers=2, fusion_layers=3),
    "synthetic": dict(comp_weight=0.9, dis_weight=10.0, rec_weight=10.0,
                      pair_weight=0.9, cart_weight=0.1, fusion_mix=0.8,
                      score_blend=0.5, debias_strength=0.5, debias_blend=0.8,
                      temperature=0.01, epochs=30, batch_size=64,
                      dim=32, proj_layers=2, proj_hidden=64,
                      fusion_layers=1, fusion_hidden=64),
}

# Model variants from the component study: each zeroes one ingredient.
ABLATIONS: dict[str, dict] = {
    "baseline": dict(dis_weight=0.0, rec_weight=0.0, pair_weight=0.0,
                     cart_weight=0.0, score_blend=1.0),
    "no-rec": dict(rec_weight=0.0),
    "no-pair": dict(pair_weight=0.0),
    "no-cts": dict(cart_weight=0.0),
    "no-fusion": dict(fusion_mix=0.0),
}


def preset_config(name: str, **overrides) -> RunConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    merged = {**PRESETS[name], **overrides}
    return RunConfig(**merged)


def apply_ablation(cfg: RunConfig, name: str) -> RunConfig:
    if name not in ABLATIONS:
        raise KeyError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    return replace(cfg, **ABLATIONS[name])


def config_fields() -> list[str]:
    return [f.name for f in fields(RunConfig)]
