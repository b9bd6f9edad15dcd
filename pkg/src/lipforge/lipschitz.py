"""Spectral norms, Gershgorin disks, empirical Lipschitz constants and masked bounds.

All matrix quantities refer to a linear layer in explicit matrix form: the
dense weight itself, or the (filters x C*kh*kw) kernel matrix of a
convolution acting on im2col patch rows.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .network import Conv2D, Dense, Forge, Model
from .tensor import ContractError, DimensionError, Tensor


class UndefinedRatioError(ValueError):
    """Every vector in the dataset is zero, so no ratio ||Wx|| / ||x|| exists."""


class ConvergenceWarning(RuntimeWarning):
    pass


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


# successive estimates closer than this differ only by rounding
_ROUNDING = 64 * np.finfo(np.float64).eps


@dataclass
class PowerIteration:
    value: float
    vector: np.ndarray
    iterations: int
    converged: bool
    achieved_tol: float


def power_iteration(W, seed: int = 0, tol: float = 1e-10, max_iter: int = 5000) -> PowerIteration:
    """Largest singular value of ``W`` by power iteration on ``W^T W``.

    Stops once successive estimates of sigma differ by less than ``tol``
    (relative), and the geometric extrapolation of the remaining error is
    below ``tol`` too, or after ``max_iter`` iterations.  The start vector is drawn
    from a generator seeded with ``seed``.
    """
    W = _arr(W)
    if W.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {W.shape}")
    n = W.shape[1]
    if n == 0 or not np.any(W):
        return PowerIteration(0.0, np.zeros(n), 0, True, 0.0)
    A = W.T @ W
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    sigma_prev = None
    change = math.inf
    for k in range(1, max_iter + 1):
        w = A @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # start vector landed in the null space; nudge deterministically
            v = np.roll(v, 1) + 1.0 / math.sqrt(n)
            v /= np.linalg.norm(v)
            continue
        v = w / nw
        sigma = float(np.linalg.norm(W @ v))
        if sigma_prev is not None:
            prev_change, change = change, abs(sigma - sigma_prev) / sigma
            # geometric tail estimate: when convergence is slow a small step
            # does not yet mean a small remaining error
            if change <= _ROUNDING:
                remaining = 0.0
            elif change < prev_change < math.inf:
                ratio = change / prev_change
                remaining = change * ratio / (1.0 - ratio)
            else:
                remaining = math.inf
            if change < tol and remaining < tol:
                return PowerIteration(sigma, v, k, True, max(change, remaining))
        sigma_prev = sigma
    return PowerIteration(sigma_prev or 0.0, v, max_iter, False, change)


def spectral_norm(W, seed: int = 0, tol: float = 1e-10, max_iter: int = 5000) -> float:
    res = power_iteration(W, seed=seed, tol=tol, max_iter=max_iter)
    if not res.converged:
        warnings.warn(
            f"power iteration stopped after {res.iterations} iterations "
            f"(relative change {res.achieved_tol:.3g} > {tol:g})",
            ConvergenceWarning,
            stacklevel=2,
        )
    return res.value


def gram(W) -> np.ndarray:
    """``W^T W`` (the real case of the conjugate-transpose product)."""
    W = _arr(W)
    if W.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {W.shape}")
    return W.T @ W


@dataclass(frozen=True)
class GershgorinDisk:
    row: int
    center: float
    radius: float

    def contains(self, z: complex, tol: float = 0.0) -> bool:
        return abs(z - self.center) <= self.radius + tol


def _square(A) -> np.ndarray:
    A = _arr(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {A.shape}")
    return A


def gershgorin_disks(A) -> list[GershgorinDisk]:
    A = _square(A)
    diag = np.diag(A)
    off = np.abs(A)
    np.fill_diagonal(off, 0.0)
    radii = off.sum(axis=1)
    return [GershgorinDisk(i, float(diag[i]), float(radii[i])) for i in range(A.shape[0])]


def gershgorin_bound(A) -> float:
    """``max_i |a_ii| + sum_{j != i} |a_ij|``: bounds the modulus of every eigenvalue."""
    A = _square(A)
    if A.size == 0:
        return 0.0
    off = np.abs(A)
    diag = np.diag(off).copy()
    np.fill_diagonal(off, 0.0)
    return float(np.max(diag + off.sum(axis=1)))


def mask_columns(A, masked) -> np.ndarray:
    """Copy of ``A`` with the columns listed in ``masked`` set to zero."""
    A = _arr(A)
    idx = np.asarray(sorted(set(int(j) for j in masked)), dtype=np.int64)
    if idx.size and (idx[0] < 0 or idx[-1] >= A.shape[1]):
        raise ContractError(f"column indices {idx.tolist()} out of range for {A.shape[1]} columns")
    out = A.copy()
    out[:, idx] = 0.0
    return out


def empirical_lipschitz(W, S) -> float:
    """``max ||W x|| / ||x||`` over the non-zero rows ``x`` of ``S``."""
    W = _arr(W)
    S = _arr(S)
    if S.ndim == 1:
        S = S[None, :]
    if S.shape[0] == 0:
        raise ContractError("empirical Lipschitz constant needs a non-empty dataset")
    if S.shape[1] != W.shape[1]:
        raise DimensionError(f"dataset width {S.shape[1]} does not match matrix {W.shape}")
    norms = np.linalg.norm(S, axis=1)
    nz = norms > 0
    if not np.any(nz):
        raise UndefinedRatioError("all vectors in the dataset are zero")
    out = np.linalg.norm(S[nz] @ W.T, axis=1)
    return float(np.max(out / norms[nz]))


def masked_gershgorin_bounds(A, keep: np.ndarray) -> np.ndarray:
    """Gershgorin bound of ``A`` with columns zeroed per row of the 0/1 ``keep`` matrix.

    For each mask ``k`` this is ``max_i sum_j |a_ij| k_j``, which equals
    ``gershgorin_bound(mask_columns(A, ~k))``.  The all-ones row gives the
    unmasked bound through the same arithmetic path, so masked <= unmasked
    holds exactly in floating point.
    """
    A = _square(A)
    keep = np.atleast_2d(np.asarray(keep, dtype=np.float64))
    absA = np.abs(A)
    # elementwise product + per-row numpy sum keeps one summation order for every mask
    # (a BLAS product may switch kernels between calls, breaking exact monotonicity)
    chunk = max(1, (1 << 22) // max(1, absA.size))
    out = np.empty(keep.shape[0])
    for s in range(0, keep.shape[0], chunk):
        k = keep[s : s + chunk]
        out[s : s + chunk] = (k[:, None, :] * absA[None, :, :]).sum(axis=2).max(axis=1)
    return out


# -- per-model report ----------------------------------------------------------


@dataclass
class LayerBound:
    index: int
    kind: str
    matrix_shape: tuple
    spectral_norm: float
    gershgorin_bound: float
    empirical_lipschitz: float
    forge_threshold: float | None = None
    masked_gershgorin: np.ndarray | None = field(default=None, repr=False)
    masked_sigma: np.ndarray | None = field(default=None, repr=False)
    shape_conditional: bool = False

    @property
    def masked_gershgorin_mean(self):
        return None if self.masked_gershgorin is None else float(self.masked_gershgorin.mean())

    @property
    def masked_gershgorin_max(self):
        return None if self.masked_gershgorin is None else float(self.masked_gershgorin.max())

    @property
    def masked_sigma_mean(self):
        return None if self.masked_sigma is None else float(self.masked_sigma.mean())

    @property
    def masked_sigma_max(self):
        return None if self.masked_sigma is None else float(self.masked_sigma.max())


@dataclass
class BoundReport:
    layers: list
    product_bound: float
    activation_factor: float = 1.0
    activation_flags: list = field(default_factory=list)

    @property
    def product_bound_with_activations(self) -> float:
        return self.product_bound * self.activation_factor


def _sigma_of_columns(W: np.ndarray, keep: np.ndarray, cache: dict) -> float:
    key = keep.tobytes()
    if key not in cache:
        cols = W[:, keep]
        cache[key] = float(np.linalg.norm(cols, 2)) if cols.size else 0.0
    return cache[key]


def layer_bound_report(model: Model, S, seed: int = 0) -> BoundReport:
    """Per-linear-layer bounds over the activations ``S`` actually produces.

    When a forge layer with a positive threshold sits directly before a
    linear layer, each sample gets its own column mask (inputs the forge
    zeroes) and the masked Gershgorin bound / masked spectral norm are
    reported per sample.  A zero threshold masks nothing.
    """
    S = _arr(S)
    if S.shape[0] == 0:
        raise ContractError("bound report needs a non-empty dataset")
    linear = model.linear_indices()
    if not linear:
        raise ContractError("model has no linear layer")
    _, acts = model.forward(S, collect=True)
    inputs = [S] + [a.data for a in acts]
    n = S.shape[0]

    rows = []
    product = 1.0
    for i in linear:
        layer = model.layers[i]
        W = layer.matrix()
        A = gram(W)
        sigma = spectral_norm(W, seed=seed)
        product *= sigma
        conv = isinstance(layer, Conv2D)
        x_in = inputs[i]
        vecs = layer.patches(x_in) if conv else x_in.reshape(n, -1)
        try:
            emp = empirical_lipschitz(W, vecs)
        except UndefinedRatioError:
            emp = 0.0
        rec = LayerBound(
            index=i,
            kind=layer.tag,
            matrix_shape=W.shape,
            spectral_norm=sigma,
            # same arithmetic path as the masked bounds so masked <= unmasked is exact
            gershgorin_bound=float(masked_gershgorin_bounds(A, np.ones(A.shape[0]))[0]),
            empirical_lipschitz=emp,
            shape_conditional=conv,
        )
        prev = model.layers[i - 1] if i > 0 else None
        if isinstance(prev, Forge):
            c_th = prev.state.threshold
            rec.forge_threshold = c_th
            pre = inputs[i - 1]
            t = layer.patches(pre) if conv else pre.reshape(n, -1)
            keep = np.abs(t) > c_th if c_th > 0 else np.ones(t.shape, dtype=bool)
            per_vec = masked_gershgorin_bounds(A, keep)
            cache: dict = {np.ones(W.shape[1], dtype=bool).tobytes(): sigma}
            sig = np.array([_sigma_of_columns(W, k, cache) for k in keep])
            if conv:
                per_sample = per_vec.reshape(n, -1).max(axis=1)
                sig = sig.reshape(n, -1).max(axis=1)
            else:
                per_sample = per_vec
            rec.masked_gershgorin = per_sample
            rec.masked_sigma = sig
        rows.append(rec)

    factor = 1.0
    flags = []
    for i, layer in enumerate(model.layers):
        if isinstance(layer, (Dense, Conv2D, Forge)):
            continue
        lip = getattr(layer, "lipschitz", 1.0)
        if lip != 1.0:
            factor *= lip
            flags.append(f"layer {i} ({layer.tag}): external constant {lip}")
    return BoundReport(rows, product, factor, flags)
