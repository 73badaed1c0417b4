"""Equilibrium functions ``F(h, u; theta)`` with hand-coded vector-Jacobian products.

Two families are supported, both with ``u`` entering through ``h + u``:

* ``linear``      F(h, u) = W (h + u) + b
* ``affine_tanh`` F(h, u) = tanh(W (h + u) + b)

Jacobian convention
-------------------
Dense Jacobians follow the *row-index-is-input* convention
``J[i, j] = dF_j / dh_i``. Under it the exact backward pass reads as plain
matrix products (``grad_theta = J_theta @ inv(I - J_h) @ v``), and applying
``J_h`` to a vector is exactly a vector-Jacobian product. For the linear
family ``J_h == W.T``.

States may be 1-D ``(d,)`` or batched 2-D ``(n, d)``; rows are independent
problems sharing ``theta``. Parameter gradients sum over rows.

Parameters are flattened as ``theta = concat(W.ravel(), b)`` (row-major W).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from .densemath import power_iteration_sigma
from .errors import ParameterError, ScaleGuardError, ShapeError

LINEAR = "linear"
AFFINE_TANH = "affine_tanh"
KINDS = (LINEAR, AFFINE_TANH)

DENSE_LIMIT = 256
SN_MAX_ITERS = 5000
SN_TOL = 1e-14


@dataclass(frozen=True, eq=False)
class EqModule:
    kind: str
    W: np.ndarray
    b: np.ndarray
    target_lipschitz: float
    sigma_cache: float = float("nan")
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown module kind {self.kind!r}; expected one of {KINDS}")
        W = np.asarray(self.W, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if W.ndim != 2 or W.shape[0] != W.shape[1] or b.shape != (W.shape[0],):
            raise ShapeError("EqModule", W.shape, b.shape)
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @property
    def n_params(self) -> int:
        return self.d * self.d + self.d

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.b])

    def with_theta(self, theta) -> "EqModule":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ShapeError("with_theta", theta.shape, (self.n_params,))
        d = self.d
        return replace(self, W=theta[: d * d].reshape(d, d).copy(), b=theta[d * d:].copy())

    def __eq__(self, other):
        if not isinstance(other, EqModule):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.target_lipschitz == other.target_lipschitz
            and np.array_equal(self.W, other.W)
            and np.array_equal(self.b, other.b)
        )

    __hash__ = None


def _check_lipschitz(target_L: float) -> None:
    if not (0.0 < target_L < 1.0):
        raise ParameterError(f"target Lipschitz constant must lie in (0, 1), got {target_L}")


def spectral_normalize(m: EqModule, mode: str = "scale", seed=0) -> EqModule:
    """Rescale ``W`` so its power-iteration spectral norm is ``target_lipschitz``.

    ``mode="scale"`` always rescales to the target (classic spectral
    normalization); ``mode="project"`` only shrinks when the norm exceeds the
    target, which is what the training loop uses after each update.
    """
    if mode not in ("scale", "project"):
        raise ParameterError(f"unknown normalization mode {mode!r}")
    sigma = power_iteration_sigma(m.W, max_iters=SN_MAX_ITERS, tol=SN_TOL, seed=seed).estimate
    if sigma == 0.0:
        return replace(m, sigma_cache=0.0)
    factor = m.target_lipschitz / sigma
    if mode == "project" and factor >= 1.0:
        return replace(m, sigma_cache=sigma)
    return replace(m, W=m.W * factor, sigma_cache=sigma)


def new_synthetic(d: int, target_L: float, seed: int, kind: str = AFFINE_TANH) -> EqModule:
    """Random symmetric spectrally-normalized module.

    ``W = target_L * S / sigma_max(S)`` with ``S = (R + R.T) / 2`` and
    ``R ~ U[-1, 1]``; ``b ~ U[-0.1, 0.1]``.
    """
    if d < 1:
        raise ParameterError(f"dimension must be >= 1, got {d}")
    _check_lipschitz(target_L)
    rng = np.random.default_rng(seed)
    R = rng.uniform(-1.0, 1.0, size=(d, d))
    S = 0.5 * (R + R.T)
    b = rng.uniform(-0.1, 0.1, size=d)
    raw = EqModule(kind, S, b, float(target_L), seed=seed)
    return spectral_normalize(raw, mode="scale")


def from_matrix(W, b, kind: str = LINEAR, target_L: float | None = None) -> EqModule:
    """Wrap explicit parameters without normalizing them (oracle tests)."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    if target_L is None:
        target_L = float(np.linalg.norm(W, 2)) if W.any() else 0.5
        target_L = min(max(target_L, 1e-12), 1.0 - 1e-12)
    return EqModule(kind, W, b, float(target_L))


def _check_state(m: EqModule, name: str, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != m.d:
        raise ShapeError(name, x.shape, (m.d,))
    return x


def _pre(m: EqModule, h, u):
    h = _check_state(m, "forward(h)", h)
    u = _check_state(m, "forward(u)", u)
    x = h + u
    return x, x @ m.W.T + m.b


def forward(m: EqModule, h, u) -> np.ndarray:
    _, z = _pre(m, h, u)
    if m.kind == LINEAR:
        return z
    return np.tanh(z)


def vjp_h(m: EqModule, h, u, v) -> np.ndarray:
    """``J_h v`` in row-is-input convention, i.e. ``W.T (phi' * v)``."""
    return Linearization(m, h, u).h(v)


def vjp_u(m: EqModule, h, u, v) -> np.ndarray:
    # u enters only through h + u
    return Linearization(m, h, u).u(v)


def vjp_theta(m: EqModule, h, u, v) -> np.ndarray:
    """Flattened ``[grad_W.ravel(), grad_b]``, summed over batch rows."""
    return Linearization(m, h, u).theta(v)


def vjp_all(m: EqModule, h, u, v) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(vjp_h, vjp_u, vjp_theta)`` sharing one forward evaluation."""
    return Linearization(m, h, u).all(v)


class Linearization:
    """VJPs of ``F`` frozen at one point ``(h, u)``.

    Evaluates the activation derivative once so repeated products (Neumann
    sums, adjoint iterations) cost one matrix product each.
    """

    def __init__(self, m: EqModule, h, u):
        x, z = _pre(m, h, u)
        self.m = m
        self.x = x
        if m.kind == LINEAR:
            self.dphi = None
        else:
            t = np.tanh(z)
            self.dphi = 1.0 - t * t

    def _seed(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != self.x.shape:
            raise ShapeError("vjp(v)", v.shape, self.x.shape)
        return v if self.dphi is None else self.dphi * v

    def h(self, v) -> np.ndarray:
        return self._seed(v) @ self.m.W

    u = h

    def _theta_from_seed(self, a) -> np.ndarray:
        if a.ndim == 1:
            return np.concatenate([np.outer(a, self.x).ravel(), a])
        return np.concatenate([(a.T @ self.x).ravel(), a.sum(axis=0)])

    def theta(self, v) -> np.ndarray:
        return self._theta_from_seed(self._seed(v))

    def all(self, v):
        a = self._seed(v)
        gh = a @ self.m.W
        return gh, gh.copy(), self._theta_from_seed(a)


def materialize_jacobians(m: EqModule, h, u, limit: int = DENSE_LIMIT) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``(J_h, J_theta)`` of shapes ``(d, d)`` and ``(d*d + d, d)``.

    Built column by column by pushing the standard basis through the VJPs,
    so that ``J_h @ v == vjp_h(v)``. Single (1-D) states only.
    """
    if m.d > limit:
        raise ScaleGuardError(m.d, limit)
    h = _check_state(m, "materialize_jacobians(h)", h)
    if h.ndim != 1:
        raise ShapeError("materialize_jacobians(h)", h.shape, (m.d,))
    d = m.d
    J_h = np.empty((d, d))
    J_t = np.empty((m.n_params, d))
    eye = np.eye(d)
    lin = Linearization(m, h, u)
    for j in range(d):
        gh, _, gt = lin.all(eye[j])
        J_h[:, j] = gh
        J_t[:, j] = gt
    return J_h, J_t


# -- serialization ---------------------------------------------------------

_MAGIC = "phantomgrad-eqmodule v1"


def dumps(m: EqModule) -> str:
    """Text form: header line, then ``d`` rows of W, then one row of b."""
    out = io.StringIO()
    seed = "none" if m.seed is None else str(m.seed)
    out.write(f"{_MAGIC} kind={m.kind} d={m.d} L={m.target_lipschitz!r} seed={seed}\n")
    for row in m.W:
        out.write(" ".join(repr(float(x)) for x in row) + "\n")
    out.write(" ".join(repr(float(x)) for x in m.b) + "\n")
    return out.getvalue()


def loads(text: str) -> EqModule:
    lines = text.strip().splitlines()
    if not lines or not lines[0].startswith(_MAGIC):
        raise ValueError("not a serialized EqModule")
    fields = dict(tok.split("=", 1) for tok in lines[0][len(_MAGIC):].split())
    d = int(fields["d"])
    if len(lines) != d + 2:
        raise ValueError(f"expected {d + 2} lines, found {len(lines)}")
    W = np.array([[float(x) for x in ln.split()] for ln in lines[1:d + 1]])
    b = np.array([float(x) for x in lines[d + 1].split()])
    seed = None if fields["seed"] == "none" else int(fields["seed"])
    return EqModule(fields["kind"], W.reshape(d, d), b, float(fields["L"]), seed=seed)


def save(m: EqModule, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(m))


def load(path) -> EqModule:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
