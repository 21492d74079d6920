"""Dense building blocks: MLPs, the optimizer, RNG and the gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    DegenerateVectorError,
    NORM_EPS,
    ParamStore,
    Tensor,
    affine,
    as_tensor,
    relu,
    row0,
)


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; same seed gives the same stream on every platform."""
    return np.random.default_rng(int(seed))


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths [d_in, hidden..., d_out]; ReLU between all but the last layer."""

    widths: tuple[int, ...]

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("MLPSpec needs at least one layer (two widths)")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


def init_mlp(store: ParamStore, prefix: str, spec: MLPSpec, rng: np.random.Generator) -> None:
    """Register fan-in-scaled uniform weights and zero biases under `prefix/`."""
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        bound = 1.0 / np.sqrt(fan_in)
        store.add(f"{prefix}/W{i}", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        store.add(f"{prefix}/b{i}", np.zeros(fan_out))


def mlp_forward(store: ParamStore, prefix: str, spec: MLPSpec, x) -> Tensor:
    """Run the MLP on a batch (n, d_in); a bare (d_in,) vector is lifted to one row.

    Single vectors must be plain arrays (no gradient history); training always
    goes through 2-D batches so every sample takes the same BLAS path.
    """
    x = as_tensor(x)
    single = x.data.ndim == 1
    if single:
        if x._parents or x.requires_grad:
            raise ValueError("1-D mlp_forward inputs must be constants; batch them instead")
        x = as_tensor(x.data.reshape(1, -1))
    if x.data.shape[1] != spec.widths[0]:
        raise ValueError(f"input dim {x.data.shape[1]} != spec d_in {spec.widths[0]}")
    h = x
    for i in range(spec.n_layers):
        h = affine(h, store[f"{prefix}/W{i}"], store[f"{prefix}/b{i}"])
        if i < spec.n_layers - 1:
            h = relu(h)
    return row0(h) if single else h


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """cos(u, v); raises on (near-)zero-norm inputs."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu <= NORM_EPS or nv <= NORM_EPS:
        raise DegenerateVectorError(f"norms ({nu:.3e}, {nv:.3e}) too small for cosine")
    return float(u @ v / (nu * nv))


def softmax_ce(scores: np.ndarray, gt_index: int, temperature: float) -> float:
    """-log softmax(scores / temperature)[gt_index], max-subtracted for stability."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError("empty score vector")
    if not (0 <= gt_index < s.size):
        raise IndexError(f"gt_index {gt_index} out of range for {s.size} scores")
    z = s / float(temperature)
    m = z.max()
    return float(np.log(np.exp(z - m).sum()) - (z[gt_index] - m))


class Adam:
    """Adam over a ParamStore; parameters without gradients are left untouched."""

    def __init__(self, store: ParamStore, lr: float = 5e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = {n: np.zeros_like(t.data) for n, t in store.items()}
        self._v = {n: np.zeros_like(t.data) for n, t in store.items()}

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.store.items():
            if p.grad is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * (p.grad * p.grad)
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


@dataclass
class CoordCheck:
    name: str
    index: tuple
    analytic: float
    fd: float
    rel_err: float
    ok: bool


@dataclass
class GradCheckReport:
    checks: list[CoordCheck] = field(default_factory=list)
    ok: bool = True

    def failures(self):
        return [c for c in self.checks if not c.ok]


def grad_check(loss_fn, store: ParamStore, rel_tol: float = 1e-4,
               n_coords: int = 20, h: float = 1e-5,
               rng: np.random.Generator | None = None,
               names: list[str] | None = None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Samples `n_coords` coordinates per parameter. A coordinate failing at
    step `h` is retried at h/100: a step that straddles a ReLU kink fails
    at the wide step only, while a wrong gradient fails at both.
    """
    rng = rng or make_rng(0)
    store.zero_grads()
    loss = loss_fn()
    loss.backward()
    analytic = {n: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for n, t in store.items()}

    def fd_at(t: Tensor, ix: tuple, step: float) -> float:
        orig = t.data[ix]
        t.data[ix] = orig + step
        up = loss_fn().item()
        t.data[ix] = orig - step
        dn = loss_fn().item()
        t.data[ix] = orig
        return (up - dn) / (2.0 * step)

    report = GradCheckReport()
    for name, t in store.items():
        if names is not None and name not in names:
            continue
        flat = t.data.size
        k = min(n_coords, flat)
        chosen = rng.choice(flat, size=k, replace=False)
        for c in np.sort(chosen):
            ix = np.unravel_index(int(c), t.data.shape)
            ana = float(analytic[name][ix])
            fd = fd_at(t, ix, h)
            err = abs(ana - fd) / max(1.0, abs(fd))
            ok = err <= rel_tol
            if not ok:
                fd2 = fd_at(t, ix, h / 100.0)
                err2 = abs(ana - fd2) / max(1.0, abs(fd2))
                if err2 <= rel_tol:
                    fd, err, ok = fd2, err2, True
            report.checks.append(CoordCheck(name, ix, ana, fd, err, ok))
            report.ok &= ok
    return report
