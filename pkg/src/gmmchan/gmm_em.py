"""Complex Gaussian mixtures with structurally constrained covariances.

The EM objective is the data log-likelihood plus a weak fixed prior
``-delta * sum_k tr(C_k^{-1})``.  Its M-step adds ``delta / N_k`` to every
component's sample covariance (diagonal loading), which keeps the
generalized-EM trace monotone for every constraint.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp
from sklearn.cluster import KMeans

from .errors import DegenerateDataError, FormatError, ParameterError, ShapeError
from .structured_cov import (
    SPECTRAL_FLOOR,
    BlockCirculant,
    BlockToeplitz,
    Circulant1D,
    CovarianceModel,
    Diagonal,
    Full,
    Kronecker,
    Toeplitz1D,
    dft_transform,
    factorize,
    floor_spectrum,
    inverse_dft_transform,
    project_sample_cov,
    toeplitz_m_step_update,
)

log = logging.getLogger(__name__)

CONSTRAINTS = ("full", "diagonal", "toeplitz", "circulant")
EMPTY_COMPONENT_MASS = 1e-10
ROW_BLOCK = 2048  # samples per block in the E- and M-step loops


@dataclass(frozen=True)
class EmConfig:
    n_components: int
    max_iters: int = 300
    rel_tol: float = 1e-6
    init: str = "kmeans++"
    spectral_floor: float = SPECTRAL_FLOOR
    loading: float = 1e-6
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_components < 1:
            raise ParameterError("n_components must be >= 1")
        if self.max_iters < 1:
            raise ParameterError("max_iters must be >= 1")
        if not self.rel_tol > 0:
            raise ParameterError("rel_tol must be > 0")
        if self.init not in ("kmeans++", "random"):
            raise ParameterError(f"unknown init scheme {self.init!r}")


@dataclass(frozen=True, eq=False)
class GmmModel:
    """Mixture ``sum_k p(k) N_C(x; mu_k, C_k)``; all covariances share one tag."""

    weights: np.ndarray
    means: np.ndarray
    covariances: tuple[CovarianceModel, ...]
    dims: tuple[int, ...]

    def __post_init__(self):
        weights = np.array(self.weights, dtype=float).ravel()
        means = np.array(self.means, dtype=complex)
        covs = tuple(self.covariances)
        dims = tuple(int(d) for d in self.dims)
        k = weights.size
        if means.ndim != 2 or means.shape[0] != k or len(covs) != k:
            raise ShapeError("weights, means and covariances disagree on K")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ParameterError("mixing weights must be non-negative and sum to 1")
        n = means.shape[1]
        if int(np.prod(dims)) != n or any(c.dim != n for c in covs):
            raise ShapeError("component dimensions disagree with dims")
        if len({type(c) for c in covs}) != 1:
            raise ParameterError("all covariances must share one parameterization")
        weights.setflags(write=False)
        means.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covs)
        object.__setattr__(self, "dims", dims)

    @property
    def n_components(self):
        return self.weights.size

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def tag(self):
        return self.covariances[0].tag


@dataclass
class FitResult:
    model: GmmModel
    log_likelihood: np.ndarray
    responsibilities: np.ndarray
    n_iter: int
    converged: bool
    rescues: list = field(default_factory=list)

    def __iter__(self):
        # allows ``model, trace = fit(...)``
        return iter((self.model, self.log_likelihood))


def _as_data(data, dim=None):
    x = np.asarray(data, dtype=complex)
    if x.ndim == 1:
        x = x[None, :] if dim is None or x.size == dim else x[:, None]
    if x.ndim != 2:
        raise ShapeError("data must be a list of vectors")
    if dim is not None and x.shape[1] != dim:
        raise ShapeError(f"data dimension {x.shape[1]} != model dimension {dim}")
    return x


def component_log_joint(model, x, factors=None):
    """``log p(k) + log N_C(x; mu_k, C_k)`` for every sample and component."""
    x = _as_data(x, model.dim)
    factors = factors or [factorize(c, k) for k, c in enumerate(model.covariances)]
    out = np.empty((x.shape[0], model.n_components))
    const = model.dim * np.log(np.pi)
    with np.errstate(divide="ignore"):
        log_w = np.log(model.weights)
    for start in range(0, x.shape[0], ROW_BLOCK):
        xb = x[start:start + ROW_BLOCK]
        for k, fac in enumerate(factors):
            z = fac.whiten(xb - model.means[k])
            quad = np.einsum("ij,ij->i", z.real, z.real) + np.einsum("ij,ij->i", z.imag, z.imag)
            out[start:start + ROW_BLOCK, k] = log_w[k] - const - fac.logdet - quad
    return out


def log_density(model, x):
    """Mixture log-density of one vector (scalar) or of each row of ``x``."""
    single = np.ndim(x) == 1
    lj = component_log_joint(model, x)
    val = logsumexp(lj, axis=1)
    return float(val[0]) if single else val


def responsibilities(model, x):
    single = np.ndim(x) == 1
    lj = component_log_joint(model, x)
    r = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
    return r[0] if single else r


def _kmeans_centers(x, k, rng):
    """k-means (k-means++ seeded) centers of a subsample of ``min(n, 10 k N)`` points."""
    n, dim = x.shape
    m = min(n, 10 * k * dim)
    sub = np.sort(rng.choice(n, m, replace=False)) if m < n else np.arange(n)
    xs = x[sub]
    real = np.hstack([xs.real, xs.imag])
    km = KMeans(k, init="k-means++", n_init=1, random_state=int(rng.integers(2**31 - 1)))
    centers = km.fit(real).cluster_centers_
    return centers[:, :dim] + 1j * centers[:, dim:]


def _spectral_cls(constraint, dims):
    if constraint == "toeplitz":
        return Toeplitz1D if len(dims) == 1 else BlockToeplitz
    return Circulant1D if len(dims) == 1 else BlockCirculant


def _weighted_moment(x, mean, r, mass, diagonal):
    """``sum_i r_i (x_i - mean)(x_i - mean)^H / mass``, or only its diagonal."""
    dim = x.shape[1]
    acc = np.zeros(dim) if diagonal else np.zeros((dim, dim), dtype=complex)
    for start in range(0, x.shape[0], ROW_BLOCK):
        rb = r[start:start + ROW_BLOCK]
        sel = np.flatnonzero(rb > 0)  # rows without responsibility contribute nothing
        if sel.size == 0:
            continue
        xs = (x[start + sel] - mean) * np.sqrt(rb[sel])[:, None]
        if diagonal:
            acc += np.einsum("ij,ij->j", xs.real, xs.real) + np.einsum("ij,ij->j", xs.imag, xs.imag)
        else:
            acc += xs.T @ xs.conj()
    return acc / mass


def fit(data, cfg, constraint, dims=None, init_means=None):
    """Fit a ``cfg.n_components`` mixture by (generalized) EM.

    Parameters
    ----------
    data : array_like, shape (n, N)
        Complex samples.
    cfg : EmConfig
    constraint : {"full", "diagonal", "toeplitz", "circulant"}
        Covariance structure; ``dims`` of length 2 selects the block variants.
    dims : tuple, optional
        ``(n_carriers, n_symbols)`` for vectorized grids, ``(N,)`` otherwise.
    init_means : array_like, shape (K, N), optional
        Fixed initial means instead of k-means++ seeding.

    Returns
    -------
    FitResult
        Model, per-iteration objective trace and the final responsibilities,
        which are the E-step at the returned parameters.
    """
    if constraint not in CONSTRAINTS:
        raise ParameterError(f"unknown constraint {constraint!r}")
    x = _as_data(data)
    n, dim = x.shape
    dims = (dim,) if dims is None else tuple(int(d) for d in dims)
    if int(np.prod(dims)) != dim:
        raise ShapeError(f"dims {dims} do not match data dimension {dim}")
    k_comp = cfg.n_components
    if n < k_comp:
        raise DegenerateDataError(f"{n} samples cannot support {k_comp} components")

    # circulant fitting is diagonal EM on DFT-transformed samples
    work = "diagonal" if constraint == "circulant" else constraint
    xw = dft_transform(x, dims) if constraint == "circulant" else x

    mean_all = xw.mean(axis=0)
    cov_all = _weighted_moment(xw, mean_all, np.ones(n), n, False)
    scale = float(np.real(np.trace(cov_all))) / dim
    if not scale > 0:
        raise DegenerateDataError("data has zero variance")
    delta = cfg.loading * scale
    prior = delta * n / k_comp  # fixed prior strength; loading per component = prior / N_k
    floor = cfg.spectral_floor

    init_cov = project_sample_cov(cov_all + delta * np.eye(dim), work, dims, floor)
    rng = np.random.default_rng(cfg.rng_seed)
    if init_means is not None:
        seeds = _as_data(init_means, dim).copy()
        if seeds.shape[0] != k_comp:
            raise ShapeError("init_means must have n_components rows")
        if constraint == "circulant":
            seeds = dft_transform(seeds, dims)
    elif cfg.init == "random":
        seeds = xw[rng.choice(n, k_comp, replace=False)].copy()
    else:
        seeds = _kmeans_centers(xw, k_comp, rng)

    def m_step(resp, covs, prev_means):
        mass = resp.sum(axis=0)
        empty = np.flatnonzero(mass < EMPTY_COMPONENT_MASS)
        means = (resp.T @ xw) / np.maximum(mass, EMPTY_COMPONENT_MASS)[:, None]
        means[empty] = prev_means[empty]
        new_covs = list(covs)
        for k in range(k_comp):
            if k in empty:
                continue
            r = resp[:, k]
            if work == "diagonal":
                var = _weighted_moment(xw, means[k], r, mass[k], True) + prior / mass[k]
                new_covs[k] = Diagonal(floor_spectrum(var, floor))
            else:
                s = _weighted_moment(xw, means[k], r, mass[k], False) + (prior / mass[k]) * np.eye(dim)
                if work == "full":
                    new_covs[k] = Full(s)
                else:
                    c_new = toeplitz_m_step_update(covs[k].c, s, dims, floor, component=k)
                    new_covs[k] = _spectral_cls("toeplitz", dims)(c_new, dims)
        return mass / n, means, new_covs, empty

    # first responsibilities: hard assignment of every sample to its nearest center
    dist = (np.sum(np.abs(xw) ** 2, axis=1)[:, None] - 2 * np.real(xw @ seeds.conj().T)
            + np.sum(np.abs(seeds) ** 2, axis=1)[None, :])
    resp = np.zeros((n, k_comp))
    resp[np.arange(n), np.argmin(dist, axis=1)] = 1.0
    weights, means, covs, empty = m_step(resp, [init_cov] * k_comp, seeds)
    for k in empty:
        # a center that attracted no sample keeps its position and the global covariance
        covs[k], weights[k] = init_cov, 1.0 / k_comp
    weights = weights / weights.sum()

    def evaluate(weights, means, covs):
        model = GmmModel(weights, means, tuple(covs), dims)
        factors = [factorize(c, k) for k, c in enumerate(covs)]
        lj = component_log_joint(model, xw, factors)
        ll = logsumexp(lj, axis=1)
        penalty = prior * sum(f.trace_inverse() for f in factors)
        return model, np.exp(lj - ll[:, None]), ll, float(np.sum(ll) - penalty)

    model, resp, ll, objective = evaluate(weights, means, covs)
    trace, rescues = [objective], []
    converged = False
    it = 0
    while it < cfg.max_iters:
        it += 1
        weights, means, covs, empty = m_step(resp, model.covariances, model.means)
        candidate = evaluate(weights, means, covs)
        if empty.size:
            # reseed empty components at the worst-explained samples; keep the
            # reseeded model only if it does not lower the objective
            r_weights, r_means, r_covs = weights.copy(), means.copy(), list(covs)
            order = np.argsort(ll, kind="stable")
            for j, k in enumerate(empty):
                r_means[k] = xw[order[j % n]]
                r_covs[k] = init_cov
                r_weights[k] = 1.0 / k_comp
            reseeded = evaluate(r_weights / r_weights.sum(), r_means, r_covs)
            if reseeded[3] >= candidate[3] or reseeded[3] >= objective:
                candidate = reseeded
                rescues.extend((it, int(k)) for k in empty)
                log.warning("EM iteration %d: components %s emptied, reseeded", it, list(empty))
            else:
                log.info("EM iteration %d: reseeding %s would lower the objective; left dormant",
                         it, list(empty))
        previous = objective
        model, resp, ll, objective = candidate
        trace.append(objective)
        if abs(objective - previous) < cfg.rel_tol * abs(previous):
            converged = True
            break

    if constraint == "circulant":
        cls = _spectral_cls("circulant", dims)
        model = GmmModel(model.weights, inverse_dft_transform(model.means, dims),
                         tuple(cls(c.d, dims) for c in model.covariances), dims)
    return FitResult(model, np.asarray(trace), resp, it, converged, rescues)


def fit_time_and_freq(dataset, cfg_t, cfg_c, constraint):
    """Fit a time GMM on all grid rows and a frequency GMM on all grid columns.

    Returns ``(gmm_time, gmm_freq)``.
    """
    grids = np.asarray(dataset, dtype=complex)
    if grids.ndim == 2:
        grids = grids[None]
    if grids.ndim != 3 or grids.shape[0] == 0:
        raise DegenerateDataError("dataset must be a non-empty stack of grids")
    n, n_c, n_t = grids.shape
    rows = grids.reshape(n * n_c, n_t)
    cols = np.swapaxes(grids, 1, 2).reshape(n * n_t, n_c)
    gmm_t = fit(rows, cfg_t, constraint, (n_t,)).model
    gmm_c = fit(cols, cfg_c, constraint, (n_c,)).model
    return gmm_t, gmm_c


# --------------------------------------------------------------------------
# Model file format (little endian):
#   magic "GMCM", version, tag code, K, n_dims, dims...   (uint32)
#   Kronecker only: time tag code, freq tag code          (uint32)
#   weights (K float64), means (K*N complex as re/im float64),
#   covariance payloads: dense matrices as re/im pairs, spectra as float64.

MODEL_MAGIC = b"GMCM"
MODEL_VERSION = 1
_TAG_CODES = {"full": 1, "diagonal": 2, "block-toeplitz": 3, "toeplitz": 4,
              "block-circulant": 5, "circulant": 6, "kronecker": 7}
_CODE_TAGS = {v: k for k, v in _TAG_CODES.items()}


def _cov_payload(cov):
    if isinstance(cov, Full):
        return np.ascontiguousarray(cov.matrix).astype("<c16").tobytes()
    if isinstance(cov, Diagonal):
        return cov.d.astype("<f8").tobytes()
    if isinstance(cov, Kronecker):
        return _cov_payload(cov.time) + _cov_payload(cov.freq)
    return cov.c.astype("<f8").tobytes()


def _payload_size(tag, dims):
    n = int(np.prod(dims))
    return {"full": 16 * n * n, "diagonal": 8 * n, "block-toeplitz": 32 * n,
            "toeplitz": 16 * n, "block-circulant": 8 * n, "circulant": 8 * n}[tag]


def _read_cov(tag, dims, buf):
    n = int(np.prod(dims))
    if tag == "full":
        return Full(np.frombuffer(buf, "<c16").reshape(n, n).astype(complex))
    vals = np.frombuffer(buf, "<f8").astype(float)
    if tag == "diagonal":
        return Diagonal(vals)
    cls = {"block-toeplitz": BlockToeplitz, "toeplitz": Toeplitz1D,
           "block-circulant": BlockCirculant, "circulant": Circulant1D}[tag]
    return cls(vals, dims)


def model_to_bytes(model):
    tag = model.tag
    head = [MODEL_MAGIC, struct.pack("<IIII", MODEL_VERSION, _TAG_CODES[tag],
                                     model.n_components, len(model.dims))]
    head.append(struct.pack(f"<{len(model.dims)}I", *model.dims))
    if tag == "kronecker":
        first = model.covariances[0]
        head.append(struct.pack("<II", _TAG_CODES[first.time.tag], _TAG_CODES[first.freq.tag]))
    body = [model.weights.astype("<f8").tobytes(),
            np.ascontiguousarray(model.means).astype("<c16").tobytes()]
    body.extend(_cov_payload(c) for c in model.covariances)
    return b"".join(head + body)


def model_from_bytes(raw, source="<bytes>"):
    try:
        if raw[:4] != MODEL_MAGIC:
            raise FormatError(f"{source}: bad magic")
        version, code, k, ndims = struct.unpack_from("<IIII", raw, 4)
        if version != MODEL_VERSION:
            raise FormatError(f"{source}: unsupported version {version}")
        if code not in _CODE_TAGS or ndims not in (1, 2) or k < 1:
            raise FormatError(f"{source}: bad header")
        tag = _CODE_TAGS[code]
        pos = 20
        dims = struct.unpack_from(f"<{ndims}I", raw, pos)
        pos += 4 * ndims
        n = int(np.prod(dims))
        if tag == "kronecker":
            if ndims != 2:
                raise FormatError(f"{source}: Kronecker model needs 2 dims")
            t_code, f_code = struct.unpack_from("<II", raw, pos)
            pos += 8
            sub = (_CODE_TAGS.get(t_code), _CODE_TAGS.get(f_code))
            if None in sub or "kronecker" in sub:
                raise FormatError(f"{source}: bad Kronecker factor tags")
            sizes = (_payload_size(sub[0], (dims[1],)), _payload_size(sub[1], (dims[0],)))
        else:
            sizes = (_payload_size(tag, dims),)
        expected = pos + 8 * k + 16 * k * n + k * sum(sizes)
        if len(raw) != expected:
            raise FormatError(f"{source}: expected {expected} bytes, found {len(raw)}")
        weights = np.frombuffer(raw, "<f8", k, pos).astype(float)
        pos += 8 * k
        means = np.frombuffer(raw, "<c16", k * n, pos).astype(complex).reshape(k, n)
        pos += 16 * k * n
        covs = []
        for _ in range(k):
            if tag == "kronecker":
                t = _read_cov(sub[0], (dims[1],), raw[pos:pos + sizes[0]])
                f = _read_cov(sub[1], (dims[0],), raw[pos + sizes[0]:pos + sizes[0] + sizes[1]])
                covs.append(Kronecker(t, f))
            else:
                covs.append(_read_cov(tag, dims, raw[pos:pos + sizes[0]]))
            pos += sum(sizes)
        return GmmModel(weights, means, tuple(covs), dims)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{source}: {exc}") from None


def save_model(path, model):
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path):
    return model_from_bytes(Path(path).read_bytes(), str(path))
