"""Feature fusion, augmentation losses and frequency-aware debias weights.

Pseudo composition features are synthesized from attribute/object feature
pairs by a residual fusion network. Pairwise augmentation fuses each
sample's own feature pair in batch order; Cartesian augmentation fuses
every cross pairing of a batch, covering compositions absent from the
training labels. The Cartesian cross-entropy is reweighted per composition
by inverse-frequency weights blended across attribute, object and
composition statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ParamStore,
    Tensor,
    add,
    as_tensor,
    ce_rows,
    concat_cols,
    cos_matrix,
    cos_rows,
    mul,
    neg,
    repeat_rows,
    scale,
    tile_rows,
    tmean,
)
from .nn import MLPSpec, init_mlp, mlp_forward
from .space import CompositionSpace, FrequencyTable


class FusionNet:
    """MLP from concatenated (attr, obj) features to a composition feature,
    mixed with the additive residual: mix * F(a ++ o) + (1 - mix) * (a + o).

    mix = 0 bypasses the network entirely (pure additive fusion) and mix = 1
    drops the residual; both short-circuit so the unused branch contributes
    neither compute nor gradient.
    """

    def __init__(self, store: ParamStore, dim: int, n_layers: int, hidden: int,
                 mix: float, rng):
        if not (0.0 <= mix <= 1.0):
            raise ValueError("fusion mix must be in [0, 1]")
        widths = (2 * dim, *([hidden] * (n_layers - 1)), dim)
        self.spec = MLPSpec(widths)
        self.store = store
        self.mix = float(mix)
        init_mlp(store, "fusion", self.spec, rng)

    def __call__(self, v_attr, v_obj) -> Tensor:
        v_attr, v_obj = as_tensor(v_attr), as_tensor(v_obj)
        if v_attr.data.shape != v_obj.data.shape:
            raise ValueError(f"shape mismatch {v_attr.data.shape} vs {v_obj.data.shape}")
        if self.mix == 0.0:
            return add(v_attr, v_obj)
        learned = mlp_forward(self.store, "fusion", self.spec,
                              concat_cols(v_attr, v_obj))
        if self.mix == 1.0:
            return learned
        return add(scale(learned, self.mix),
                   scale(add(v_attr, v_obj), 1.0 - self.mix))


def disentangle_loss(v_attr, v_obj, text_attr_gt, text_obj_gt) -> Tensor:
    """Mean over the batch of cos(v_attr, T_obj_gt) + cos(v_obj, T_attr_gt).

    Penalizes attribute features that resemble the object label's text row
    and vice versa; per-sample range is [-2, 2].
    """
    crossed = add(cos_rows(v_attr, text_obj_gt), cos_rows(v_obj, text_attr_gt))
    return tmean(crossed)


def reconstruction_loss(pseudo, v_comp) -> Tensor:
    """Mean negative cosine between pseudo and real composition features."""
    return tmean(neg(cos_rows(pseudo, v_comp)))


def pairwise_aug(pseudo, text_rows, gt_indices, temperature: float):
    """Score pseudo features against candidate text rows; CE at the gt column.

    Returns (score matrix tensor (n, K), mean CE loss tensor).
    """
    gt_indices = np.asarray(gt_indices, dtype=np.int64)
    if gt_indices.min(initial=0) < 0 or \
            gt_indices.max(initial=-1) >= text_rows.data.shape[0]:
        raise IndexError("ground-truth index outside the candidate set")
    scores = cos_matrix(pseudo, text_rows)
    loss = tmean(ce_rows(scores, gt_indices, temperature))
    return scores, loss


def cartesian_labels(attr_labels, obj_labels, space: CompositionSpace):
    """Cross every batch attribute label with every batch object label.

    Returns (composition ids of length n*n in i-major order, candidate pair
    list deduplicated in canonical order, gt index into the candidates per
    pseudo feature). Row i*n + j carries label (attr_i, obj_j).
    """
    attr_labels = np.asarray(attr_labels, dtype=np.int64)
    obj_labels = np.asarray(obj_labels, dtype=np.int64)
    n = attr_labels.size
    comp_ids = (np.repeat(attr_labels, n) * space.n_objs + np.tile(obj_labels, n))
    cand_ids = np.unique(comp_ids)
    gt = np.searchsorted(cand_ids, comp_ids)
    candidates = [space.comp_pair(c) for c in cand_ids.tolist()]
    return comp_ids, candidates, gt


def cartesian_pseudo(net: FusionNet, v_attr, v_obj):
    """Fuse every (i, j) cross pairing of the batch; i-major row order.

    The diagonal rows coincide with the pairwise construction bit for bit
    because both run through the same batched fusion path.
    """
    v_attr, v_obj = as_tensor(v_attr), as_tensor(v_obj)
    n = v_attr.data.shape[0]
    return net(repeat_rows(v_attr, n), tile_rows(v_obj, n))


@dataclass(frozen=True)
class DebiasConfig:
    """Inverse-frequency reweighting knobs.

    `strength` is the exponent on 1/(count+1): 0 treats all labels equally,
    1 is strict inverse frequency. `comp_blend` trades composition-level
    weighting against the sum of the primitive-level weights.
    """

    strength: float = 0.5
    comp_blend: float = 0.9

    def __post_init__(self):
        if not (0.0 <= self.strength <= 1.0):
            raise ValueError("strength must be in [0, 1]")
        if not (0.0 <= self.comp_blend <= 1.0):
            raise ValueError("comp_blend must be in [0, 1]")


def factor_weights(counts, strength: float) -> np.ndarray:
    """Normalized inverse-frequency weights: mean over the label set is 1."""
    counts = np.asarray(counts, dtype=np.float64)
    raw = 1.0 / (counts + 1.0) ** strength
    return raw / raw.sum() * counts.size


def debias_weight_table(freq: FrequencyTable, cfg: DebiasConfig) -> np.ndarray:
    """Blended per-composition weight over the full Cartesian label space.

    w(a, o) = blend * w_comp[(a, o)] + (1 - blend) * (w_attr[a] + w_obj[o]),
    indexed canonically; compositions never observed keep count 0 and get the
    largest composition-level weight.
    """
    w_attr = factor_weights(freq.attr_counts, cfg.strength)
    w_obj = factor_weights(freq.obj_counts, cfg.strength)
    w_comp = factor_weights(freq.comp_counts, cfg.strength)
    prim = w_attr[:, None] + w_obj[None, :]
    blended = cfg.comp_blend * w_comp.reshape(prim.shape) + (1.0 - cfg.comp_blend) * prim
    return blended.reshape(-1)


def cartesian_aug_loss(pseudo, text_rows, gt_indices, weights, temperature: float) -> Tensor:
    """Debias-weighted CE over the Cartesian pseudo features (batch mean)."""
    gt_indices = np.asarray(gt_indices, dtype=np.int64)
    assert gt_indices.min(initial=0) >= 0 and \
        gt_indices.max(initial=-1) < text_rows.data.shape[0], \
        "Cartesian gt index escaped its own candidate set"
    scores = cos_matrix(pseudo, text_rows)
    ce = ce_rows(scores, gt_indices, temperature)
    return tmean(mul(ce, np.asarray(weights, dtype=np.float64)))
