"""Score and loss assembly for the three-path recognizer plus augmentation.

The classifier scores an image's attribute/object/composition features
against the matching text rows; the blended classification score mixes the
composition path against the sum of the primitive paths. At inference the
classification score is further blended with a retrieval score of the
image's own fused pseudo feature against the candidate prompt rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .augment import (
    DebiasConfig,
    FusionNet,
    cartesian_aug_loss,
    cartesian_labels,
    cartesian_pseudo,
    debias_weight_table,
    disentangle_loss,
    pairwise_aug,
    reconstruction_loss,
)
from .autodiff import (
    ParamStore,
    Tensor,
    add,
    ce_rows,
    cos_matrix,
    rows,
    scale,
    tmean,
)
from .encoders import TokenTable, VisualProjectors
from .nn import make_rng
from .space import CompositionSpace, FrequencyTable


@dataclass(frozen=True)
class LossWeights:
    """Loss/score blending hyperparameters.

    comp_weight blends the composition path against the primitive paths in
    both the classification score and loss; dis/rec/pair/cartesian scale the
    auxiliary losses; score_blend mixes classification against pseudo-feature
    retrieval at inference.
    """

    comp_weight: float = 0.9
    dis: float = 10.0
    rec: float = 10.0
    pair: float = 0.9
    cartesian: float = 0.1
    score_blend: float = 0.5

    def __post_init__(self):
        for name in ("comp_weight", "score_blend"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        for name in ("dis", "rec", "pair", "cartesian"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    proj_layers: int = 2
    proj_hidden: int = 64
    fusion_layers: int = 1
    fusion_hidden: int = 64
    fusion_mix: float = 0.8
    temperature: float = 0.01
    pseudo_context: bool = False
    pseudo_context_scale: float = 1.0
    comp_candidates: str = "full"       # train-time CE label set: full Cartesian or seen
    cartesian_candidates: str = "batch"  # Cartesian CE label set: batch cross or full

    def __post_init__(self):
        if not (0.0 <= self.fusion_mix <= 1.0):
            raise ValueError("fusion_mix must be in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.comp_candidates not in ("full", "seen"):
            raise ValueError("comp_candidates must be 'full' or 'seen'")
        if self.cartesian_candidates not in ("batch", "full"):
            raise ValueError("cartesian_candidates must be 'batch' or 'full'")


@dataclass
class ScoreBundle:
    """Per-image score vectors over a fixed candidate pair list."""

    candidates: list
    attr_scores: np.ndarray    # (n, n_attrs)
    obj_scores: np.ndarray     # (n, n_objs)
    comp_scores: np.ndarray    # (n, K)
    class_scores: np.ndarray   # (n, K)
    pair_aug_scores: np.ndarray | None = None
    combined: np.ndarray = field(default=None)


def classification_scores(attr_scores, obj_scores, comp_scores, pairs,
                          comp_weight: float) -> np.ndarray:
    """Blend per-candidate: w * comp + (1 - w) * (attr-of-pair + obj-of-pair)."""
    a_ix = np.fromiter((p[0] for p in pairs), dtype=np.int64, count=len(pairs))
    o_ix = np.fromiter((p[1] for p in pairs), dtype=np.int64, count=len(pairs))
    prim = attr_scores[:, a_ix] + obj_scores[:, o_ix]
    if comp_weight == 1.0:
        return np.array(comp_scores, copy=True)
    if comp_weight == 0.0:
        return prim
    return comp_weight * comp_scores + (1.0 - comp_weight) * prim


def inference_score(class_scores, pair_aug_scores, score_blend: float) -> np.ndarray:
    """score_blend * classification + (1 - score_blend) * pseudo retrieval.

    The blend short-circuits at 0 and 1 so the unused side never perturbs
    the result (keeps blend=1 bit-identical to the classifier-only model).
    """
    if score_blend == 1.0:
        return np.array(class_scores, copy=True)
    if score_blend == 0.0:
        return np.array(pair_aug_scores, copy=True)
    if class_scores.shape != pair_aug_scores.shape:
        raise ValueError(f"candidate-set mismatch: {class_scores.shape} "
                         f"vs {pair_aug_scores.shape}")
    return score_blend * class_scores + (1.0 - score_blend) * pair_aug_scores


def total_loss(cla, dis, rec, pair, cartesian, weights: LossWeights):
    """Weighted sum of the loss components (floats or tensors)."""
    return (cla + weights.dis * dis + weights.rec * rec
            + weights.pair * pair + weights.cartesian * cartesian)


class DefaModel:
    """All trainable state plus the forward paths for training and inference."""

    def __init__(self, space: CompositionSpace, d_backbone: int,
                 config: ModelConfig, seed: int = 0,
                 freq: FrequencyTable | None = None,
                 debias: DebiasConfig | None = None):
        self.space = space
        self.config = config
        self.d_backbone = d_backbone
        self.seed = seed
        self.store = ParamStore()
        rng = make_rng(seed)
        self.projectors = VisualProjectors(self.store, d_backbone, config.dim,
                                           config.proj_hidden, config.proj_layers, rng)
        self.tokens = TokenTable(self.store, space, config.dim, rng,
                                 pseudo_context=config.pseudo_context,
                                 pseudo_context_scale=config.pseudo_context_scale)
        self.fusion = FusionNet(self.store, config.dim, config.fusion_layers,
                                config.fusion_hidden, config.fusion_mix, rng)
        self.seen_pairs = space.sorted_pairs(space.seen)
        self._seen_pos = -np.ones(space.n_comps, dtype=np.int64)
        for k, p in enumerate(self.seen_pairs):
            self._seen_pos[space.comp_index(*p)] = k
        if config.comp_candidates == "full":
            self.train_candidates = space.all_pairs()
            self._train_cand_of_comp = np.arange(space.n_comps)
        else:
            self.train_candidates = self.seen_pairs
            lookup = -np.ones(space.n_comps, dtype=np.int64)
            for k, p in enumerate(self.seen_pairs):
                lookup[space.comp_index(*p)] = k
            self._train_cand_of_comp = lookup
        self.debias_table = None
        if freq is not None:
            self.set_debias(freq, debias or DebiasConfig())

    def set_debias(self, freq: FrequencyTable, cfg: DebiasConfig) -> None:
        self.debias_table = debias_weight_table(freq, cfg)

    # -- training forward ---------------------------------------------------

    def batch_terms(self, feats, attr_labels, obj_labels,
                    weights: LossWeights) -> dict[str, Tensor]:
        """Loss components on one batch; zero-weighted parts are skipped."""
        attr_labels = np.asarray(attr_labels, dtype=np.int64)
        obj_labels = np.asarray(obj_labels, dtype=np.int64)
        tau = self.config.temperature
        v_attr, v_obj, v_comp = self.projectors(feats)
        t_attr = self.tokens.text_features("attr")
        t_obj = self.tokens.text_features("obj")
        t_comp = self.tokens.text_features("comp", self.train_candidates)

        comp_gt = self._train_cand_of_comp[
            attr_labels * self.space.n_objs + obj_labels]
        if np.any(comp_gt < 0):
            raise ValueError("batch label outside the training candidate set")
        ce_attr = tmean(ce_rows(cos_matrix(v_attr, t_attr), attr_labels, tau))
        ce_obj = tmean(ce_rows(cos_matrix(v_obj, t_obj), obj_labels, tau))
        ce_comp = tmean(ce_rows(cos_matrix(v_comp, t_comp), comp_gt, tau))
        w1 = weights.comp_weight
        terms = {
            "cla": add(scale(ce_comp, w1), scale(add(ce_attr, ce_obj), 1.0 - w1)),
        }

        if weights.dis > 0:
            terms["dis"] = disentangle_loss(v_attr, v_obj,
                                            rows(t_attr, attr_labels),
                                            rows(t_obj, obj_labels))
        if weights.rec > 0 or weights.pair > 0:
            pseudo = self.fusion(v_attr, v_obj)
            if weights.rec > 0:
                terms["rec"] = reconstruction_loss(pseudo, v_comp)
            if weights.pair > 0:
                prompt_seen = self.tokens.prompt_features(self.seen_pairs)
                gt_seen = self._seen_pos[attr_labels * self.space.n_objs + obj_labels]
                _, terms["pair"] = pairwise_aug(pseudo, prompt_seen, gt_seen, tau)
        if weights.cartesian > 0:
            if self.debias_table is None:
                raise ValueError("Cartesian augmentation needs frequency statistics; "
                                 "call set_debias() first")
            comp_ids, cands, gt = cartesian_labels(attr_labels, obj_labels, self.space)
            if self.config.cartesian_candidates == "full":
                cands = self.space.all_pairs()
                gt = comp_ids
            v_cart = cartesian_pseudo(self.fusion, v_attr, v_obj)
            prompt_cart = self.tokens.prompt_features(cands)
            terms["cart"] = cartesian_aug_loss(v_cart, prompt_cart, gt,
                                               self.debias_table[comp_ids], tau)

        total = terms["cla"]
        for key, lam in (("dis", weights.dis), ("rec", weights.rec),
                         ("pair", weights.pair), ("cart", weights.cartesian)):
            if key in terms:
                total = add(total, scale(terms[key], lam))
        terms["total"] = total
        return terms

    # -- inference ----------------------------------------------------------

    def score_bundle(self, feats, candidate_pairs, weights: LossWeights) -> ScoreBundle:
        """Frozen-parameter scores for a batch over the given candidates."""
        v_attr, v_obj, v_comp = self.projectors(np.asarray(feats, dtype=np.float64))
        t_attr = self.tokens.text_features("attr")
        t_obj = self.tokens.text_features("obj")
        t_comp = self.tokens.text_features("comp", candidate_pairs)
        attr_scores = cos_matrix(v_attr, t_attr).data
        obj_scores = cos_matrix(v_obj, t_obj).data
        comp_scores = cos_matrix(v_comp, t_comp).data
        class_scores = classification_scores(
            attr_scores, obj_scores, comp_scores, candidate_pairs, weights.comp_weight)
        pair_scores = None
        if weights.score_blend != 1.0:
            pseudo = self.fusion(v_attr, v_obj)
            prompt = self.tokens.prompt_features(candidate_pairs)
            pair_scores = cos_matrix(pseudo, prompt).data
        combined = inference_score(class_scores, pair_scores, weights.score_blend)
        return ScoreBundle(list(candidate_pairs), attr_scores, obj_scores,
                           comp_scores, class_scores, pair_scores, combined)

    def inference_scores(self, feats, candidate_pairs, weights: LossWeights,
                         threads: int = 1, chunk: int = 512) -> np.ndarray:
        """Combined score matrix (n, K), chunked and optionally threaded.

        Chunk results are written into a preallocated matrix by index, so the
        output is identical for any thread count.
        """
        feats = np.asarray(feats, dtype=np.float64)
        n = feats.shape[0]
        out = np.empty((n, len(candidate_pairs)))
        spans = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]

        def run(span):
            s, e = span
            out[s:e] = self.score_bundle(feats[s:e], candidate_pairs, weights).combined

        if threads > 1 and len(spans) > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(run, spans))
        else:
            for span in spans:
                run(span)
        return out

    def parameter_groups(self):
        """Logical parameter groups (prefix -> names) for gradient checking."""
        prefixes = ("proj_attr", "proj_obj", "proj_comp", "tokens", "combiner", "fusion")
        return {p: [n for n, _ in self.store.group(p)] for p in prefixes}
