"""Covariance parameterizations and their fast linear algebra.

Every model acts on vectors of length ``N`` laid out like ``vec(H)``.  For
2D models ``dims = (n_carriers, n_symbols)`` and the flat index is
``t * n_carriers + c``; 1D models use ``dims = (N,)``.

All DFT matrices are unitary.  ``Q_M`` holds the first ``M`` columns of the
``2M x 2M`` unitary DFT, so ``Q_M^H Q_M = I`` and block-Toeplitz matrices
are ``Q^H diag(c) Q`` with ``Q = Q_{N_t} kron Q_{N_c}``; block-circulant
matrices are ``F^H diag(c) F`` with ``F = F_{N_t} kron F_{N_c}``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import ClassVar

import numpy as np
import scipy.linalg as sla

from .errors import CapacityError, NumericalError, ParameterError, ShapeError

SPECTRAL_FLOOR = 1e-8
DENSE_LIMIT = 4096
STEP_SIZES = (1.0, 0.5, 0.25, 0.125)


def _grid(dims):
    """Array layout (slowest axis first) of a vector with the given dims."""
    return tuple(int(d) for d in reversed(dims))


def _check_vector(x, n):
    x = np.asarray(x)
    if x.shape[-1] != n:
        raise ShapeError(f"vector length {x.shape[-1]} does not match dimension {n}")
    return x


def oversampled_dft_apply(c, x, dims):
    """Compute ``Q^H diag(c) Q x`` by zero-padded FFTs.

    ``c`` has ``2**d * prod(dims)`` entries; ``x`` may carry leading batch axes.
    """
    grid = _grid(dims)
    n = int(np.prod(grid))
    c = np.asarray(c, dtype=float)
    padded = tuple(2 * g for g in grid)
    if c.size != int(np.prod(padded)):
        raise ShapeError(f"spectrum length {c.size} does not match dims {tuple(dims)}")
    x = _check_vector(x, n)
    axes = tuple(range(-len(grid), 0))
    z = np.fft.fftn(x.reshape(x.shape[:-1] + grid), s=padded, axes=axes, norm="ortho")
    z *= c.reshape(padded)
    out = np.fft.ifftn(z, axes=axes, norm="ortho")
    out = out[(Ellipsis,) + tuple(slice(0, g) for g in grid)]
    return out.reshape(x.shape[:-1] + (n,))


def circulant_apply(c, x, dims):
    """Compute ``F^H diag(c) F x`` by (multi-dimensional) FFTs."""
    grid = _grid(dims)
    n = int(np.prod(grid))
    c = np.asarray(c, dtype=float)
    if c.size != n:
        raise ShapeError(f"spectrum length {c.size} does not match dims {tuple(dims)}")
    x = _check_vector(x, n)
    axes = tuple(range(-len(grid), 0))
    z = np.fft.fftn(x.reshape(x.shape[:-1] + grid), axes=axes, norm="ortho")
    z *= c.reshape(grid)
    return np.fft.ifftn(z, axes=axes, norm="ortho").reshape(x.shape[:-1] + (n,))


def dft_transform(x, dims):
    """Unitary (2D-)DFT ``F x`` of vectors laid out with ``dims``."""
    grid = _grid(dims)
    axes = tuple(range(-len(grid), 0))
    x = np.asarray(x)
    return np.fft.fftn(x.reshape(x.shape[:-1] + grid), axes=axes, norm="ortho").reshape(x.shape)


def inverse_dft_transform(x, dims):
    grid = _grid(dims)
    axes = tuple(range(-len(grid), 0))
    x = np.asarray(x)
    return np.fft.ifftn(x.reshape(x.shape[:-1] + grid), axes=axes, norm="ortho").reshape(x.shape)


@functools.lru_cache(maxsize=32)
def oversampled_dft_matrix(dims):
    """Dense ``Q = Q_{N_t} kron Q_{N_c}`` (or ``Q_N`` for 1D), read-only."""
    q = np.ones((1, 1), dtype=complex)
    for m in _grid(dims):
        rows = np.arange(2 * m)[:, None]
        cols = np.arange(m)[None, :]
        q = np.kron(q, np.exp(-2j * np.pi * rows * cols / (2 * m)) / np.sqrt(2 * m))
    q.setflags(write=False)
    return q


@functools.lru_cache(maxsize=32)
def _lag_index(dims, period_factor):
    """Flat index into the lag table for every (row, column) pair."""
    grid = _grid(dims)
    coords = np.indices(grid).reshape(len(grid), -1)
    periods = tuple(period_factor * g for g in grid)
    lag = np.zeros((coords.shape[1], coords.shape[1]), dtype=np.intp)
    for axis, period in enumerate(periods):
        diff = (coords[axis][:, None] - coords[axis][None, :]) % period
        lag = lag * period + diff
    lag.setflags(write=False)
    return lag


def floor_spectrum(c, rel=SPECTRAL_FLOOR):
    c = np.asarray(c, dtype=float)
    return np.maximum(c, rel * max(float(np.mean(c)), 0.0) if c.size else 0.0)


class CovarianceModel:
    """Common interface of all covariance parameterizations."""

    tag: ClassVar[str]
    dim: int

    def apply(self, x):
        raise NotImplementedError

    def dense(self):
        raise NotImplementedError

    def shifted(self, s):
        """Model of ``C + s I``."""
        raise NotImplementedError

    def columns(self, idx):
        """``C[:, idx]`` without forming the full matrix where possible."""
        idx = np.asarray(idx, dtype=np.intp)
        e = np.zeros((idx.size, self.dim), dtype=complex)
        e[np.arange(idx.size), idx] = 1.0
        return self.apply(e).T

    def submatrix(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return self.columns(idx)[idx]

    def trace(self):
        return float(np.real(np.trace(self.dense())))


@dataclass(frozen=True, eq=False)
class Full(CovarianceModel):
    matrix: np.ndarray
    tag: ClassVar[str] = "full"

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeError("full covariance must be square")
        m = (m + m.conj().T) / 2
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self):
        return self.matrix.shape[0]

    def apply(self, x):
        x = _check_vector(x, self.dim)
        return x @ self.matrix.T

    def dense(self):
        return self.matrix.copy()

    def shifted(self, s):
        return Full(self.matrix + s * np.eye(self.dim))

    def columns(self, idx):
        return self.matrix[:, np.asarray(idx, dtype=np.intp)]


@dataclass(frozen=True, eq=False)
class Diagonal(CovarianceModel):
    d: np.ndarray
    tag: ClassVar[str] = "diagonal"

    def __post_init__(self):
        d = np.array(self.d, dtype=float).ravel()
        if np.any(d < 0):
            raise ParameterError("diagonal entries must be non-negative")
        d.setflags(write=False)
        object.__setattr__(self, "d", d)

    @property
    def dim(self):
        return self.d.size

    def apply(self, x):
        return _check_vector(x, self.dim) * self.d

    def dense(self):
        return np.diag(self.d).astype(complex)

    def shifted(self, s):
        return Diagonal(self.d + s)

    def trace(self):
        return float(self.d.sum())


class _Spectral(CovarianceModel):
    """Shared behaviour of covariances given by a non-negative spectrum."""

    oversampled: ClassVar[bool]

    def _init_spectrum(self, c, dims):
        c = np.array(c, dtype=float).ravel()
        dims = tuple(int(d) for d in dims)
        factor = 2 ** len(dims) if self.oversampled else 1
        if c.size != factor * int(np.prod(dims)):
            raise ShapeError(f"spectrum length {c.size} does not match dims {dims}")
        if np.any(c < 0):
            raise ParameterError("spectrum entries must be non-negative")
        c.setflags(write=False)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "dims", dims)

    @property
    def dim(self):
        return int(np.prod(self.dims))

    def apply(self, x):
        if self.oversampled:
            return oversampled_dft_apply(self.c, x, self.dims)
        return circulant_apply(self.c, x, self.dims)

    def dense(self):
        grid = _grid(self.dims)
        factor = 2 if self.oversampled else 1
        lags = np.fft.ifftn(self.c.reshape(tuple(factor * g for g in grid)))
        return lags.ravel()[_lag_index(self.dims, factor)]

    def shifted(self, s):
        return type(self)(self.c + s, self.dims)

    def trace(self):
        # (Q^H diag(c) Q) has diagonal sum(c) / 2**d; F^H diag(c) F has sum(c)
        return float(self.c.sum() / (2 ** len(self.dims) if self.oversampled else 1))


@dataclass(frozen=True, eq=False, init=False)
class BlockToeplitz(_Spectral):
    c: np.ndarray
    dims: tuple[int, int]
    tag: ClassVar[str] = "block-toeplitz"
    oversampled: ClassVar[bool] = True

    def __init__(self, c, dims):
        if len(dims) != 2:
            raise ShapeError("BlockToeplitz needs dims (n_carriers, n_symbols)")
        self._init_spectrum(c, dims)


@dataclass(frozen=True, eq=False, init=False)
class Toeplitz1D(_Spectral):
    c: np.ndarray
    dims: tuple[int]
    tag: ClassVar[str] = "toeplitz"
    oversampled: ClassVar[bool] = True

    def __init__(self, c, dims=None):
        c = np.asarray(c, dtype=float).ravel()
        self._init_spectrum(c, (c.size // 2,) if dims is None else tuple(dims))

    @property
    def n(self):
        return self.dims[0]


@dataclass(frozen=True, eq=False, init=False)
class BlockCirculant(_Spectral):
    c: np.ndarray
    dims: tuple[int, int]
    tag: ClassVar[str] = "block-circulant"
    oversampled: ClassVar[bool] = False

    def __init__(self, c, dims):
        if len(dims) != 2:
            raise ShapeError("BlockCirculant needs dims (n_carriers, n_symbols)")
        self._init_spectrum(c, dims)


@dataclass(frozen=True, eq=False, init=False)
class Circulant1D(_Spectral):
    c: np.ndarray
    dims: tuple[int]
    tag: ClassVar[str] = "circulant"
    oversampled: ClassVar[bool] = False

    def __init__(self, c, dims=None):
        c = np.asarray(c, dtype=float).ravel()
        self._init_spectrum(c, (c.size,) if dims is None else tuple(dims))

    @property
    def n(self):
        return self.dims[0]


@dataclass(frozen=True, eq=False)
class Kronecker(CovarianceModel):
    """Separable covariance ``time kron freq`` matching the vec(H) layout."""

    time: CovarianceModel
    freq: CovarianceModel
    tag: ClassVar[str] = "kronecker"

    def __post_init__(self):
        for factor in (self.time, self.freq):
            if isinstance(factor, Kronecker):
                raise ParameterError("Kronecker factors must be 1D covariances")
        object.__setattr__(self, "_time_dense", self.time.dense())
        object.__setattr__(self, "_freq_dense", self.freq.dense())

    @property
    def dims(self):
        return (self.freq.dim, self.time.dim)

    @property
    def dim(self):
        return self.time.dim * self.freq.dim

    def apply(self, x):
        x = _check_vector(x, self.dim)
        grid = x.reshape(x.shape[:-1] + (self.time.dim, self.freq.dim))
        out = np.einsum("ij,...jk,lk->...il", self._time_dense, grid, self._freq_dense)
        return out.reshape(x.shape)

    def dense(self):
        return np.kron(self._time_dense, self._freq_dense)

    def shifted(self, s):
        return Full(self.dense() + s * np.eye(self.dim))

    def columns(self, idx):
        return self.dense()[:, np.asarray(idx, dtype=np.intp)]

    def separable_columns(self, symbols, carriers):
        """``C A^H`` for a separable pattern, ``kron(C_t[:, st], C_c[:, sc])``."""
        return np.kron(self._time_dense[:, list(symbols)], self._freq_dense[:, list(carriers)])

    def trace(self):
        return self.time.trace() * self.freq.trace()


def to_dense(cov, dense_limit=DENSE_LIMIT):
    """Dense Hermitian matrix of ``cov``; refuses dimensions above ``dense_limit``."""
    if cov.dim > dense_limit:
        raise CapacityError(f"dimension {cov.dim} exceeds dense limit {dense_limit}")
    return cov.dense()


# --------------------------------------------------------------------------
# Factorized operators: solve, whiten and log-determinant of C (+ s I).


class DenseFactor:
    """Cholesky factorization of a small Hermitian positive-definite matrix."""

    def __init__(self, matrix, component=None):
        matrix = np.asarray(matrix, dtype=complex)
        self.matrix = (matrix + matrix.conj().T) / 2
        try:
            self.chol = sla.cholesky(self.matrix, lower=True, check_finite=True)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise NumericalError(f"covariance not positive definite: {exc}", component) from None
        diag = np.real(np.diag(self.chol))
        self.logdet = float(2 * np.sum(np.log(diag)))
        # whitening many rows is a single product with the inverse factor
        self.inv_chol_t = np.ascontiguousarray(
            sla.solve_triangular(self.chol, np.eye(self.dim), lower=True, check_finite=False).T)

    @property
    def dim(self):
        return self.matrix.shape[0]

    def whiten(self, b):
        """``L^{-1} b`` for every row vector of ``b``."""
        return np.asarray(b) @ self.inv_chol_t

    def solve(self, b):
        b = np.asarray(b)
        return sla.cho_solve((self.chol, True), b.T, check_finite=False).T

    def trace_inverse(self):
        return float(np.sum(np.abs(self.inv_chol_t) ** 2))


class SpectralFactor:
    """Operator ``T^H diag(lam) T`` with a unitary transform ``T``."""

    def __init__(self, eigenvalues, dims=None, component=None):
        lam = np.asarray(eigenvalues, dtype=float).ravel()
        if np.any(~np.isfinite(lam)) or np.any(lam <= 0):
            raise NumericalError("non-positive eigenvalue in spectral factor", component)
        self.eigenvalues = lam
        self.dims = dims  # None: identity transform, else unitary DFT over dims
        self.logdet = float(np.sum(np.log(lam)))

    @property
    def dim(self):
        return self.eigenvalues.size

    def _forward(self, b):
        return np.asarray(b) if self.dims is None else dft_transform(b, self.dims)

    def _backward(self, b):
        return b if self.dims is None else inverse_dft_transform(b, self.dims)

    def whiten(self, b):
        return self._forward(b) / np.sqrt(self.eigenvalues)

    def solve(self, b):
        return self._backward(self._forward(b) / self.eigenvalues)

    def trace_inverse(self):
        return float(np.sum(1.0 / self.eigenvalues))

    @property
    def matrix(self):
        eye = np.eye(self.dim, dtype=complex)
        return self._backward(self._forward(eye) * self.eigenvalues).T


class KroneckerFactor:
    """Eigen-factorization of ``B_t kron B_c + s I`` from the small factors."""

    def __init__(self, time_matrix, freq_matrix, shift, component=None):
        lam_t, self.u_t = np.linalg.eigh(time_matrix)
        lam_c, self.u_c = np.linalg.eigh(freq_matrix)
        lam = np.outer(lam_t, lam_c) + shift
        if np.any(lam <= 0):
            raise NumericalError("Kronecker observation covariance not positive definite", component)
        self.eigenvalues = lam  # (n_t, n_c)
        self.logdet = float(np.sum(np.log(lam)))

    @property
    def dim(self):
        return self.eigenvalues.size

    def _forward(self, b):
        b = np.asarray(b)
        grid = b.reshape(b.shape[:-1] + self.eigenvalues.shape)
        return self.u_t.conj().T @ grid @ self.u_c.conj()

    def _backward(self, z):
        out = self.u_t @ z @ self.u_c.T
        return out.reshape(out.shape[:-2] + (-1,))

    def whiten(self, b):
        z = self._forward(b) / np.sqrt(self.eigenvalues)
        return z.reshape(z.shape[:-2] + (-1,))

    def solve(self, b):
        return self._backward(self._forward(b) / self.eigenvalues)

    def trace_inverse(self):
        return float(np.sum(1.0 / self.eigenvalues))

    @property
    def matrix(self):
        eye = np.eye(self.dim, dtype=complex)
        return self._backward(self._forward(eye) * self.eigenvalues).T


def _pattern_indices(pilots, dim):
    if pilots is None:
        return np.arange(dim)
    idx = getattr(pilots, "flat_indices", None)
    if idx is None:
        idx = np.asarray(pilots, dtype=np.intp).ravel()
    if idx.size == 0 or idx.min() < 0 or idx.max() >= dim:
        raise ShapeError(f"pilot indices out of range for dimension {dim}")
    return idx


def assemble_observation_cov(cov, pilots, noise_variance, component=None):
    """Factorized ``C_y = A C A^H + noise_variance * I``.

    ``pilots`` is a :class:`~gmmchan.channel_sim.PilotPattern`, an index array
    into the model dimension, or ``None`` for the full pattern.  For spectral
    models the noise is absorbed into the spectrum (``Q^H Q = I``) so
    ``C_y = A Q^H diag(c + s) Q A^H`` is gathered from FFT applications;
    diagonalized cases are solved in the transform domain directly.
    """
    if not noise_variance >= 0 or not np.isfinite(noise_variance):
        raise ParameterError("noise variance must be finite and >= 0")
    idx = _pattern_indices(pilots, cov.dim)
    full_pattern = idx.size == cov.dim and np.array_equal(idx, np.arange(cov.dim))
    if isinstance(cov, Diagonal):
        return SpectralFactor(cov.d[idx] + noise_variance, None, component)
    if isinstance(cov, (Circulant1D, BlockCirculant)) and full_pattern:
        return SpectralFactor(cov.c + noise_variance, cov.dims, component)
    if isinstance(cov, Kronecker):
        carriers = getattr(pilots, "pilot_carriers", None)
        symbols = getattr(pilots, "pilot_symbols", None)
        if pilots is None:
            carriers, symbols = range(cov.freq.dim), range(cov.time.dim)
        if carriers is not None:
            b_t = cov.time.submatrix(list(symbols))
            b_c = cov.freq.submatrix(list(carriers))
            return KroneckerFactor(b_t, b_c, noise_variance, component)
        return DenseFactor(cov.submatrix(idx) + noise_variance * np.eye(idx.size), component)
    if isinstance(cov, _Spectral):
        return DenseFactor(cov.shifted(noise_variance).submatrix(idx), component)
    return DenseFactor(cov.submatrix(idx) + noise_variance * np.eye(idx.size), component)


def factorize(cov, component=None):
    """Factorization of ``C`` itself (full pattern, no noise)."""
    return assemble_observation_cov(cov, None, 0.0, component)


# --------------------------------------------------------------------------
# Fitting helpers.


def gaussian_objective(cov_dense, sample_cov):
    """``-log det C - tr(C^{-1} S)``, the per-sample expected log-likelihood
    up to constants; ``-inf`` if ``C`` is not positive definite."""
    try:
        chol = sla.cho_factor(cov_dense, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return -np.inf
    logdet = 2 * np.sum(np.log(np.real(np.diag(chol[0]))))
    tr = np.real(np.trace(sla.cho_solve(chol, sample_cov, check_finite=False)))
    return float(-logdet - tr)


def toeplitz_m_step_update(c_current, sample_cov, dims, floor_rel=SPECTRAL_FLOOR,
                           step_sizes=STEP_SIZES, component=None, return_step=False):
    """One safeguarded EM update of a (block-)Toeplitz spectrum.

    With ``C = Q^H diag(c) Q`` and ``Theta = Q (C^-1 S C^-1 - C^-1) Q^H`` the
    raw update is ``c + c**2 * diag(Theta)``.  The result is clamped to the
    spectral floor; if that lowers ``-log det C - tr(C^-1 S)``, shorter steps
    are tried and the best candidate (never worse than ``c_current``) kept.
    """
    dims = tuple(int(d) for d in dims)
    c = np.asarray(c_current, dtype=float).ravel()
    n = int(np.prod(dims))
    sample_cov = np.asarray(sample_cov)
    if c.size != 2 ** len(dims) * n or sample_cov.shape != (n, n):
        raise ShapeError("spectrum / sample covariance do not match dims")
    if np.any(c <= 0):
        raise ParameterError("current spectrum must be strictly positive")
    model = _spectral_type(dims, True)
    cov = model(c, dims).dense()
    try:
        chol = sla.cho_factor(cov, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise NumericalError("Toeplitz covariance singular", component) from None
    inv = sla.cho_solve(chol, np.eye(n), check_finite=False)
    inner = inv @ sample_cov @ inv - inv
    q = oversampled_dft_matrix(dims)
    theta = np.real(np.einsum("mi,mi->m", q @ inner, q.conj()))
    delta = c ** 2 * theta

    logdet = 2 * np.sum(np.log(np.real(np.diag(chol[0]))))
    f_current = float(-logdet - np.real(np.trace(inv @ sample_cov)))
    best, f_best, best_step = c, f_current, 0.0
    for step in step_sizes:
        cand = floor_spectrum(c + step * delta, floor_rel)
        f = gaussian_objective(model(cand, dims).dense(), sample_cov)
        if f > f_best:
            best, f_best, best_step = cand, f, step
        if f >= f_current:
            break
    if return_step:
        return best, best_step
    return best


def _spectral_type(dims, oversampled):
    if len(dims) == 1:
        return Toeplitz1D if oversampled else Circulant1D
    return BlockToeplitz if oversampled else BlockCirculant


def project_sample_cov(sample_cov, constraint, dims, floor_rel=SPECTRAL_FLOOR):
    """Map a sample covariance onto a parameterization (used for initialization).

    Toeplitz spectra are ``2**d * diag(Q S Q^H)`` so the trace is preserved;
    circulant spectra are ``diag(F S F^H)``.
    """
    dims = tuple(int(d) for d in dims)
    s = np.asarray(sample_cov, dtype=complex)
    if constraint == "full":
        return Full(s)
    if constraint == "diagonal":
        return Diagonal(np.maximum(np.real(np.diag(s)), 0.0))
    if constraint == "toeplitz":
        q = oversampled_dft_matrix(dims)
        c = 2 ** len(dims) * np.real(np.einsum("mi,mi->m", q @ s, q.conj()))
        return _spectral_type(dims, True)(floor_spectrum(np.maximum(c, 0.0), floor_rel), dims)
    if constraint == "circulant":
        fs = dft_transform(s.T, dims).T  # F S
        c = np.real(np.diag(dft_transform(fs.conj(), dims)))  # diag(F S F^H)
        return _spectral_type(dims, False)(floor_spectrum(np.maximum(c, 0.0), floor_rel), dims)
    raise ParameterError(f"unknown constraint {constraint!r}")


COVARIANCE_TYPES = {cls.tag: cls for cls in
                    (Full, Diagonal, BlockToeplitz, Toeplitz1D, BlockCirculant, Circulant1D, Kronecker)}
