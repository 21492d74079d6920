"""Visual projectors and token-based text features.

Three independent MLPs map a backbone embedding to attribute, object and
composition features of dimension `dim`. Text features come from learnable
per-primitive tokens combined additively with a fixed random context vector
per prompt kind, passed through one shared trainable affine combiner and
L2-normalized; composition rows use the sum of their two primitive tokens.
The token tables and combiner are shared by every text path, so tuning one
attribute token moves every row mentioning that attribute.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ParamStore, Tensor, add, affine, as_tensor, normalize_rows, rows
from .nn import MLPSpec, init_mlp, mlp_forward
from .space import CompositionSpace

KINDS = ("attr", "obj", "comp")


class VisualProjectors:
    """Three parameter-disjoint MLPs from the backbone space to the shared dim."""

    def __init__(self, store: ParamStore, d_backbone: int, dim: int,
                 hidden: int, n_layers: int, rng):
        if n_layers < 1:
            raise ValueError("projectors need at least one layer")
        widths = (d_backbone, *([hidden] * (n_layers - 1)), dim)
        self.spec = MLPSpec(widths)
        self.store = store
        for kind in KINDS:
            init_mlp(store, f"proj_{kind}", self.spec, rng)

    def __call__(self, feats):
        """Project a batch (n, d_backbone) -> (v_attr, v_obj, v_comp)."""
        feats = as_tensor(feats)
        return tuple(mlp_forward(self.store, f"proj_{kind}", self.spec, feats)
                     for kind in KINDS)


class TokenTable:
    """Learnable primitive tokens + fixed prompt contexts + shared combiner.

    `pseudo_context=False` makes the pseudo-composition prompt path reuse the
    composition context, so prompt rows over the full Cartesian set coincide
    with the composition text features; True gives that path its own context,
    scaled by `pseudo_context_scale`. A heavier pseudo context plays the role
    of the fixed prompt words dominating the prompt embedding: it decouples
    the pseudo-prompt geometry from the classifier text rows.
    """

    def __init__(self, store: ParamStore, space: CompositionSpace, dim: int, rng,
                 pseudo_context: bool = False, pseudo_context_scale: float = 1.0):
        self.store = store
        self.space = space
        self.dim = dim
        bound = 1.0 / np.sqrt(dim)
        store.add("tokens/attr", rng.uniform(-bound, bound, size=(space.n_attrs, dim)))
        store.add("tokens/obj", rng.uniform(-bound, bound, size=(space.n_objs, dim)))
        store.add("combiner/W", rng.uniform(-bound, bound, size=(dim, dim)))
        store.add("combiner/b", np.zeros(dim))
        kinds = KINDS + ("pseudo",) if pseudo_context else KINDS
        self.contexts = {k: rng.uniform(-bound, bound, size=dim) for k in kinds}
        if pseudo_context:
            self.contexts["pseudo"] *= float(pseudo_context_scale)

    def _combine(self, tokens: Tensor, kind: str) -> Tensor:
        shifted = add(tokens, as_tensor(self.contexts[kind]))
        return normalize_rows(affine(shifted, self.store["combiner/W"],
                                     self.store["combiner/b"]))

    def _comp_tokens(self, pairs) -> Tensor:
        a_ix = np.fromiter((p[0] for p in pairs), dtype=np.int64, count=len(pairs))
        o_ix = np.fromiter((p[1] for p in pairs), dtype=np.int64, count=len(pairs))
        return add(rows(self.store["tokens/attr"], a_ix),
                   rows(self.store["tokens/obj"], o_ix))

    def text_features(self, kind: str, pairs=None) -> Tensor:
        """Unit-norm text rows: the full vocabulary for attr/obj, the full
        Cartesian set (canonical order) or an explicit pair list for comp."""
        if kind == "attr":
            return self._combine(self.store["tokens/attr"], "attr")
        if kind == "obj":
            return self._combine(self.store["tokens/obj"], "obj")
        if kind != "comp":
            raise ValueError(f"unknown text kind {kind!r}")
        if pairs is None:
            pairs = self.space.all_pairs()
        return self._combine(self._comp_tokens(pairs), "comp")

    def prompt_features(self, pairs) -> Tensor:
        """Pseudo-composition prompt rows for the given (attr, obj) pairs."""
        kind = "pseudo" if "pseudo" in self.contexts else "comp"
        return self._combine(self._comp_tokens(pairs), kind)

    def n_token_parameters(self) -> int:
        return self.store["tokens/attr"].size + self.store["tokens/obj"].size
