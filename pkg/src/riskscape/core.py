"""Dense numerical kernels shared by the rest of the package.

Symmetric eigendecomposition, ball projection, soft thresholding, central
finite differences, Gauss-Hermite / Gauss-Legendre rules and seeded random
streams.  Everything here is a pure function of its arguments.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import EvalError, InvalidInput

EPS = np.finfo(float).eps


class EigenDecomp(NamedTuple):
    """Eigenvalues sorted descending and matching orthonormal eigenvectors (columns)."""

    values: np.ndarray
    vectors: np.ndarray

    @property
    def min(self) -> float:
        return float(self.values[-1])

    @property
    def max(self) -> float:
        return float(self.values[0])


def symmetrize(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


def sym_eigen(m) -> EigenDecomp:
    """Eigendecomposition of a symmetric matrix, eigenvalues in descending order.

    Only the lower triangle is read; the input is symmetrized first so a
    slightly asymmetric matrix is treated as its symmetric part.
    """
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidInput(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInput("matrix has non-finite entries")
    w, q = np.linalg.eigh(symmetrize(m))
    return EigenDecomp(w[::-1].copy(), q[:, ::-1].copy())


def project_ball(x, r: float) -> np.ndarray:
    """Euclidean projection onto the centered ball of radius ``r``."""
    x = np.asarray(x, dtype=float)
    nrm = np.linalg.norm(x)
    if nrm <= r:
        return x.copy()
    return x * (r / nrm)


def soft_threshold(x, t: float) -> np.ndarray:
    """Proximal map of ``t * ||.||_1``."""
    if t < 0:
        raise InvalidInput("threshold must be nonnegative")
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _checked(f, x):
    v = float(f(x))
    if not np.isfinite(v):
        raise EvalError(f"objective is not finite at {x!r}")
    return v


def fd_gradient(f: Callable[[np.ndarray], float], x, h: float | None = None) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    if h is None:
        h = EPS ** (1 / 3) * max(1.0, float(np.max(np.abs(x), initial=0.0)))
    if h <= 0:
        raise InvalidInput("step must be positive")
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (_checked(f, x + e) - _checked(f, x - e)) / (2 * h)
    return g


def fd_hessian(f: Callable[[np.ndarray], float], x, h: float | None = None) -> np.ndarray:
    """Central-difference Hessian of a scalar function, symmetrized."""
    x = np.asarray(x, dtype=float)
    if h is None:
        h = EPS ** (1 / 4) * max(1.0, float(np.max(np.abs(x), initial=0.0)))
    if h <= 0:
        raise InvalidInput("step must be positive")
    p = x.size
    f0 = _checked(f, x)
    eye = np.eye(p) * h
    plus = [_checked(f, x + eye[i]) for i in range(p)]
    minus = [_checked(f, x - eye[i]) for i in range(p)]
    hess = np.empty((p, p))
    for i in range(p):
        hess[i, i] = (plus[i] - 2 * f0 + minus[i]) / h**2
        for j in range(i + 1, p):
            fpp = _checked(f, x + eye[i] + eye[j])
            fpm = _checked(f, x + eye[i] - eye[j])
            fmp = _checked(f, x - eye[i] + eye[j])
            fmm = _checked(f, x - eye[i] - eye[j])
            hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4 * h**2)
    return symmetrize(hess)


def fd_jacobian(g: Callable[[np.ndarray], np.ndarray], x, h: float | None = None) -> np.ndarray:
    """Central-difference Jacobian of a vector function (symmetrized when square)."""
    x = np.asarray(x, dtype=float)
    if h is None:
        h = EPS ** (1 / 3) * max(1.0, float(np.max(np.abs(x), initial=0.0)))
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(g(x + e)) - np.asarray(g(x - e))) / (2 * h))
    jac = np.stack(cols, axis=1)
    if not np.all(np.isfinite(jac)):
        raise EvalError("non-finite derivative evaluation")
    return jac


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and positive weights.  ``kind`` is ``gauss-hermite`` (weight
    ``exp(-x^2)`` on the real line), ``tensor-2d`` (nodes of shape (m*m, 2),
    same weight per axis) or ``gauss-legendre`` (unit weight on [-1, 1])."""

    nodes: np.ndarray
    weights: np.ndarray
    kind: str

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, values))


def gauss_hermite(m: int) -> QuadratureRule:
    if not 1 <= int(m) <= 200:
        raise InvalidInput(f"node count must be in [1, 200], got {m}")
    x, w = np.polynomial.hermite.hermgauss(int(m))
    return QuadratureRule(x, w, "gauss-hermite")


def tensor_2d(rule: QuadratureRule) -> QuadratureRule:
    """Product rule of a one-dimensional rule with itself."""
    a, b = np.meshgrid(rule.nodes, rule.nodes, indexing="ij")
    wa, wb = np.meshgrid(rule.weights, rule.weights, indexing="ij")
    return QuadratureRule(np.column_stack([a.ravel(), b.ravel()]), (wa * wb).ravel(), "tensor-2d")


def gauss_legendre(m: int) -> QuadratureRule:
    x, w = np.polynomial.legendre.leggauss(int(m))
    return QuadratureRule(x, w, "gauss-legendre")


def normal_rule(m: int, dim: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Nodes/weights for expectations under a standard normal in ``dim`` (1 or 2) dims.

    Returns nodes of shape (m,) or (m*m, 2) and probability weights summing to 1.
    """
    rule = gauss_hermite(m)
    if dim == 2:
        rule = tensor_2d(rule)
    elif dim != 1:
        raise InvalidInput("only 1-d and 2-d normal rules are provided")
    return np.sqrt(2.0) * rule.nodes, rule.weights / np.pi ** (dim / 2)


def composite_normal_rule(steepness: float = 1.0, m: int = 10, half_width: float = 8.5,
                          max_segments: int = 600) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre rule for ``E f(W)``, ``W ~ N(0, 1)``.

    Suited to integrands with features on the scale ``1 / steepness`` (e.g. a
    logistic of ``steepness * W``), where a plain Gauss-Hermite rule converges
    slowly.  The line is truncated to ``[-half_width, half_width]`` (tail mass
    below 1e-16 at the default) and cut into segments of width
    ``min(1, 2 / steepness)`` with ``m`` nodes each.  Weights include the
    normal density.
    """
    width = min(1.0, 2.0 / steepness) if steepness > 0 else 1.0
    count = min(max_segments, int(math.ceil(2 * half_width / width)))
    edges = np.linspace(-half_width, half_width, count + 1)
    rule = gauss_legendre(m)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * rule.nodes[None, :]).ravel()
    weights = (half[:, None] * rule.weights[None, :]).ravel() * np.exp(-0.5 * nodes**2) / math.sqrt(2 * math.pi)
    return nodes, weights


def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise InvalidInput("stream keys must be nonnegative")
        return int(key)
    digest = hashlib.sha256(str(key).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def rng_stream(seed: int, *keys) -> np.random.Generator:
    """Independent, reproducible Philox stream keyed by ``(seed, *keys)``.

    String keys are hashed with SHA-256 so streams are stable across processes
    and Python hash randomization.
    """
    ss = np.random.SeedSequence(entropy=_key_int(seed), spawn_key=tuple(_key_int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def seed_of(seed: int, *keys) -> int:
    """A 64-bit integer seed derived from ``(seed, *keys)``; handy for manifests."""
    ss = np.random.SeedSequence(entropy=_key_int(seed), spawn_key=tuple(_key_int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
