"""GMM conditional-mean estimators and genie PDP/DPS baselines.

All batch routines take pilot observations ``Y`` of shape ``(n, N_p)`` in the
order of :attr:`PilotPattern.flat_indices` and return vectorized channels
(or grids where noted).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .channel_sim import all_genie_dps, all_genie_pdp, vec
from .errors import CapacityError, ParameterError, ShapeError
from .gmm_em import GmmModel, component_log_joint
from .structured_cov import Kronecker, assemble_observation_cov

DEFAULT_RHO = 0.99
MAX_KRON_COMPONENTS = 4096
_CHUNK = 256


@dataclass(frozen=True)
class EstimateReport:
    h_hat: np.ndarray
    components_used: int
    posterior_weights: np.ndarray | None = None


@dataclass(frozen=True)
class BatchEstimate:
    h_hat: np.ndarray            # (n, N)
    components_used: np.ndarray  # (n,)
    posterior: np.ndarray        # (n, K), before truncation
    kept: np.ndarray             # (n, K), truncated and renormalized


def truncate_posterior(post, rho):
    """Keep the smallest set of largest weights reaching ``rho``; renormalize.

    Ties in weight keep the lower component index.  ``rho >= 1`` keeps all.
    """
    post = np.atleast_2d(np.asarray(post, dtype=float))
    n, k = post.shape
    if not 0 < rho <= 1:
        raise ParameterError("rho must lie in (0, 1]")
    if rho >= 1:
        return post.copy(), np.full(n, k)
    order = np.argsort(-post, axis=1, kind="stable")
    csum = np.cumsum(np.take_along_axis(post, order, axis=1), axis=1)
    counts = np.minimum(np.sum(csum < rho, axis=1) + 1, k)
    keep_sorted = np.arange(k)[None, :] < counts[:, None]
    keep = np.zeros_like(keep_sorted)
    np.put_along_axis(keep, order, keep_sorted, axis=1)
    kept = np.where(keep, post, 0.0)
    kept /= kept.sum(axis=1, keepdims=True)
    return kept, counts


def _pilot_index(pilots, model):
    idx = getattr(pilots, "flat_indices", None)
    if idx is not None:
        if tuple(pilots.dims) != tuple(model.dims):
            raise ShapeError(f"pattern grid {pilots.dims} != model dims {model.dims}")
        return np.asarray(idx)
    idx = np.asarray(pilots, dtype=np.intp).ravel()
    if idx.size == 0 or idx.min() < 0 or idx.max() >= model.dim:
        raise ShapeError("pilot indices out of range")
    return idx


class FittedEstimator:
    """Per-SNR precomputed mixture of LMMSE filters (build with :func:`precompute`).

    Holds, per component, ``W_k = C_k A^H C_{y,k}^{-1}``, the pilot-domain
    mean ``A mu_k`` and a factorization of ``C_{y,k}``.
    """

    def __init__(self, model, pilots, noise_variance, rho=DEFAULT_RHO):
        if not (np.isfinite(noise_variance) and noise_variance > 0):
            raise ParameterError("noise variance must be finite and > 0")
        if not 0 < rho <= 1:
            raise ParameterError("rho must lie in (0, 1]")
        self.model = model
        self.pilots = pilots
        self.pilot_index = _pilot_index(pilots, model)
        self.noise_variance = float(noise_variance)
        self.rho = float(rho)
        k, n = model.n_components, model.dim
        n_p = self.pilot_index.size
        self.means = model.means
        self.pilot_means = model.means[:, self.pilot_index]
        self.filters = np.empty((k, n, n_p), dtype=complex)
        self.error_variance = np.empty(k)
        self.obs_covs = []
        for j, cov in enumerate(model.covariances):
            fac = assemble_observation_cov(cov, pilots if hasattr(pilots, "flat_indices")
                                           else self.pilot_index, self.noise_variance, j)
            if isinstance(cov, Kronecker) and hasattr(pilots, "pilot_carriers"):
                ca = cov.separable_columns(pilots.pilot_symbols, pilots.pilot_carriers)
            else:
                ca = cov.columns(self.pilot_index)
            w = fac.solve(ca.conj()).conj()  # row r of C A^H times C_y^{-1}
            self.filters[j] = w
            self.error_variance[j] = (cov.trace() - np.real(np.sum(w * ca.conj()))) / n
            self.obs_covs.append(fac)
        with np.errstate(divide="ignore"):
            self.log_weights = np.log(model.weights)

    @property
    def n_pilots(self):
        return self.pilot_index.size

    def log_joint(self, y):
        y = np.atleast_2d(y)
        if y.shape[-1] != self.n_pilots:
            raise ShapeError(f"observation length {y.shape[-1]} != {self.n_pilots}")
        out = np.empty((y.shape[0], self.model.n_components))
        const = self.n_pilots * np.log(np.pi)
        for k, fac in enumerate(self.obs_covs):
            z = fac.whiten(y - self.pilot_means[k])
            out[:, k] = self.log_weights[k] - const - fac.logdet - np.sum(np.abs(z) ** 2, axis=-1)
        return out

    def posterior(self, y):
        lj = self.log_joint(y)
        return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))

    def estimate_batch(self, y, rho=None):
        y = np.atleast_2d(np.asarray(y, dtype=complex))
        post = self.posterior(y)
        kept, counts = truncate_posterior(post, self.rho if rho is None else rho)
        h = np.zeros((y.shape[0], self.model.dim), dtype=complex)
        for k in range(self.model.n_components):
            sel = np.flatnonzero(kept[:, k] > 0)
            if sel.size == 0:
                continue
            est = self.means[k] + (y[sel] - self.pilot_means[k]) @ self.filters[k].T
            h[sel] += kept[sel, k, None] * est
        return BatchEstimate(h, counts, post, kept)

    def estimate(self, y):
        y = np.asarray(y, dtype=complex)
        if y.ndim != 1:
            raise ShapeError("estimate expects a single observation vector")
        res = self.estimate_batch(y[None])
        return EstimateReport(res.h_hat[0], int(res.components_used[0]), res.posterior[0])


def precompute(model, pilots, noise_variance, rho=DEFAULT_RHO):
    """Build the per-SNR estimator for ``model`` observed through ``pilots``.

    ``pilots`` is a PilotPattern matching ``model.dims`` or, for 1D models,
    an index array of observed positions.
    """
    return FittedEstimator(model, pilots, noise_variance, rho)


def estimate(fitted, y):
    return fitted.estimate(y)


def lmmse(cov, pilots, noise_variance, y, mean=None):
    """Plain LMMSE estimate ``mu + C A^H C_y^{-1} (y - A mu)``."""
    mean = np.zeros(cov.dim, complex) if mean is None else mean
    gmm = GmmModel(np.ones(1), mean[None], (cov,), getattr(pilots, "dims", (cov.dim,)))
    return precompute(gmm, pilots, noise_variance, 1.0).estimate_batch(np.atleast_2d(y)).h_hat


# --------------------------------------------------------------------------
# Kronecker product model.


def build_kron_gmm(gmm_t, gmm_c, dataset, max_components=MAX_KRON_COMPONENTS):
    """Combine a time and a frequency GMM into a ``K_t * K_c`` product model.

    Component ``i * K_c + j`` has covariance ``C_i^time kron C_j^freq`` and
    mean ``kron(mu_i^time, mu_j^freq)``; the mixing weights are the mean
    responsibilities of one E-step over ``dataset`` (grids or vectors).
    """
    k_t, k_c = gmm_t.n_components, gmm_c.n_components
    if k_t * k_c > max_components:
        raise CapacityError(f"{k_t}*{k_c} components exceed limit {max_components}")
    if len(gmm_t.dims) != 1 or len(gmm_c.dims) != 1:
        raise ShapeError("build_kron_gmm expects 1D models")
    n_t, n_c = gmm_t.dim, gmm_c.dim
    covs = tuple(Kronecker(ct, cc) for ct in gmm_t.covariances for cc in gmm_c.covariances)
    means = np.array([np.kron(mt, mc) for mt in gmm_t.means for mc in gmm_c.means])
    prior_w = np.outer(gmm_t.weights, gmm_c.weights).ravel()
    dims = (n_c, n_t)
    model = GmmModel(prior_w / prior_w.sum(), means, covs, dims)

    data = np.asarray(dataset, dtype=complex)
    if data.ndim == 3:
        data = vec(data)
    data = np.atleast_2d(data)
    resp_sum = np.zeros(model.n_components)
    factors = None
    for start in range(0, data.shape[0], 1024):
        lj = component_log_joint(model, data[start:start + 1024], factors)
        resp_sum += np.exp(lj - logsumexp(lj, axis=1, keepdims=True)).sum(axis=0)
    weights = resp_sum / resp_sum.sum()
    return GmmModel(weights, means, covs, dims)


# --------------------------------------------------------------------------
# Batched LMMSE with per-sample noise variance (cascade second stage).


def _rowwise_cme(model, idx, y, noise_var, rho):
    """Mixture CME of rows ``y[i, r]`` with noise variance ``noise_var[i]``.

    ``y`` has shape ``(n, R, N_p)``; returns estimates ``(n, R, N)`` and the
    component counts ``(n, R)``.
    """
    idx = np.asarray(idx, dtype=np.intp)
    n, n_rows, n_p = y.shape
    k_comp = model.n_components
    ca = np.stack([c.columns(idx) for c in model.covariances])  # (K, N, Np)
    b = ca[:, idx, :]                                            # (K, Np, Np)
    pm = model.means[:, idx]
    with np.errstate(divide="ignore"):
        log_w = np.log(model.weights)
    eye = np.eye(n_p)
    out = np.empty((n, n_rows, model.dim), dtype=complex)
    counts = np.empty((n, n_rows), dtype=int)
    for s in range(0, n, _CHUNK):
        ys = y[s:s + _CHUNK]
        m = ys.shape[0]
        cy = b[None] + noise_var[s:s + _CHUNK, None, None, None] * eye   # (m, K, Np, Np)
        chol = np.linalg.cholesky(cy)
        logdet = 2 * np.sum(np.log(np.real(np.diagonal(chol, axis1=-2, axis2=-1))), axis=-1)
        resid = ys[:, None, :, :] - pm[None, :, None, :]                 # (m, K, R, Np)
        sol = np.linalg.solve(cy, np.swapaxes(resid, -1, -2))            # (m, K, Np, R)
        quad = np.real(np.einsum("mkrp,mkpr->mkr", resid.conj(), sol))
        lj = log_w[None, :, None] - n_p * np.log(np.pi) - logdet[..., None] - quad
        lj = np.moveaxis(lj, 1, -1).reshape(m * n_rows, k_comp)
        post = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
        kept, cnt = truncate_posterior(post, rho)
        kept = kept.reshape(m, n_rows, k_comp)
        est = model.means[None, None] + np.einsum("knp,mkpr->mrkn", ca, sol)  # (m, R, K, N)
        out[s:s + m] = np.einsum("mrk,mrkn->mrn", kept, est)
        counts[s:s + m] = cnt.reshape(m, n_rows)
    return out, counts


def _stage_noise(kept, error_variance, n, n_rows):
    """Posterior-weighted stage-1 error variance, averaged over the rows of each sample."""
    per_row = kept @ error_variance
    return per_row.reshape(n, n_rows).mean(axis=1)


class Cascade2x1D:
    """Cascaded 1D GMM estimation over a separable pilot lattice.

    ``order="freq_first"`` filters every pilot symbol along frequency, then
    every carrier along time; ``"time_first"`` mirrors it.  With
    ``stage2_noise="posterior"`` the second stage uses the stage-1
    posterior error variance as its noise level; ``"sigma2"`` reuses the
    channel noise variance.
    """

    def __init__(self, gmm_freq, gmm_time, pattern, noise_variance, order="freq_first",
                 rho=DEFAULT_RHO, stage2_noise="posterior"):
        if order not in ("freq_first", "time_first"):
            raise ParameterError(f"unknown cascade order {order!r}")
        if stage2_noise not in ("posterior", "sigma2"):
            raise ParameterError(f"unknown stage-2 noise rule {stage2_noise!r}")
        if gmm_freq.dim != pattern.n_carriers or gmm_time.dim != pattern.n_symbols:
            raise ShapeError("1D model dimensions do not match the pilot grid")
        self.gmm_freq, self.gmm_time = gmm_freq, gmm_time
        self.pattern = pattern
        self.noise_variance = float(noise_variance)
        self.order = order
        self.rho = rho
        self.stage2_noise = stage2_noise
        if order == "freq_first":
            self.first = precompute(gmm_freq, list(pattern.pilot_carriers), noise_variance, rho)
            self.second_model, self.second_idx = gmm_time, list(pattern.pilot_symbols)
        else:
            self.first = precompute(gmm_time, list(pattern.pilot_symbols), noise_variance, rho)
            self.second_model, self.second_idx = gmm_freq, list(pattern.pilot_carriers)
        self.second = (precompute(self.second_model, self.second_idx, noise_variance, rho)
                       if stage2_noise == "sigma2" else None)

    def estimate_batch(self, y):
        """Return ``(grids (n, N_c, N_t), components_used (n,))``.

        ``components_used`` is the mean stage-1 count plus the mean stage-2 count.
        """
        p = self.pattern
        y = np.atleast_2d(np.asarray(y, dtype=complex))
        n = y.shape[0]
        lattice = y.reshape(n, p.n_pilot_symbols, p.n_pilot_carriers)
        if self.order == "time_first":
            lattice = np.swapaxes(lattice, 1, 2)  # (n, N_pc, N_pt)
        n_rows1 = lattice.shape[1]
        res1 = self.first.estimate_batch(lattice.reshape(n * n_rows1, -1))
        stage1 = res1.h_hat.reshape(n, n_rows1, -1)
        obs2 = np.swapaxes(stage1, 1, 2)  # rows of the other dimension
        n_rows2 = obs2.shape[1]
        if self.second is not None:
            res2 = self.second.estimate_batch(obs2.reshape(n * n_rows2, -1))
            stage2, cnt2 = res2.h_hat.reshape(n, n_rows2, -1), res2.components_used.reshape(n, n_rows2)
        else:
            noise2 = _stage_noise(res1.kept, self.first.error_variance, n, n_rows1)
            noise2 = np.maximum(noise2, 1e-12)
            stage2, cnt2 = _rowwise_cme(self.second_model, self.second_idx, obs2, noise2, self.rho)
        grids = stage2 if self.order == "freq_first" else np.swapaxes(stage2, 1, 2)
        counts = res1.components_used.reshape(n, n_rows1).mean(axis=1) + cnt2.mean(axis=1)
        return grids, counts


def estimate_2x1d(gmm_freq, gmm_time, obs, pattern, order="freq_first", rho=DEFAULT_RHO,
                  stage2_noise="posterior"):
    """Cascaded estimate of one grid from an :class:`Observation`."""
    cascade = Cascade2x1D(gmm_freq, gmm_time, pattern, obs.noise_variance, order, rho, stage2_noise)
    grids, _ = cascade.estimate_batch(obs.y[None])
    return grids[0]


# --------------------------------------------------------------------------
# Genie PDP / DPS baselines (need the true channel; not precomputable).


def _lag_matrix(r):
    """Dense ``C[a, b] = r[(a - b) mod N]`` for stacked lag tables ``r (..., N)``."""
    n = r.shape[-1]
    lag = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
    return r[..., lag]


def _pdp_dense(p):
    # F diag(p) F^H
    return _lag_matrix(np.fft.fft(p, axis=-1) / p.shape[-1])


def _dps_dense(d):
    # F^H diag(d) F
    return _lag_matrix(np.fft.ifft(d, axis=-1))


def _batched_lmmse(cov, idx, y, noise_var):
    """LMMSE for stacks of covariances ``cov (..., N, N)`` and observations ``y (..., Np)``.

    ``noise_var`` broadcasts against the leading axes.  Returns estimates and
    per-stack error variance ``tr(C - W A C) / N``.
    """
    idx = np.asarray(idx, dtype=np.intp)
    ca = cov[..., :, idx]
    cy = ca[..., idx, :] + np.asarray(noise_var)[..., None, None] * np.eye(idx.size)
    sol = np.linalg.solve(cy, y[..., None])[..., 0]
    est = np.einsum("...np,...p->...n", ca, sol)
    x = np.linalg.solve(cy, np.swapaxes(ca, -1, -2).conj())
    tr_wac = np.real(np.einsum("...np,...pn->...", ca, x))
    err = (np.real(np.trace(cov, axis1=-2, axis2=-1)) - tr_wac) / cov.shape[-1]
    return est, err


def estimate_pdp_dps_2x1d(h_true, y, pattern, noise_variance, stage2_noise="posterior"):
    """Genie 2x1D baseline: per-symbol PDP then per-carrier DPS LMMSE (freq first).

    ``h_true`` is one grid or a stack ``(n, N_c, N_t)``; ``y`` the matching
    pilot observations.  Returns grids of the same leading shape.
    """
    single = np.ndim(h_true) == 2
    grids = np.atleast_3d(h_true) if not single else np.asarray(h_true)[None]
    y = np.atleast_2d(y)
    n = grids.shape[0]
    p = pattern
    sym, car = list(p.pilot_symbols), list(p.pilot_carriers)
    out = np.empty_like(grids, dtype=complex)
    for s in range(0, n, _CHUNK):
        g = grids[s:s + _CHUNK]
        m = g.shape[0]
        lattice = y[s:s + _CHUNK].reshape(m, p.n_pilot_symbols, p.n_pilot_carriers)
        pdp = all_genie_pdp(g)[:, sym, :]                       # (m, N_pt, N_c)
        est1, err1 = _batched_lmmse(_pdp_dense(pdp), car, lattice, noise_variance)
        if stage2_noise == "posterior":
            noise2 = np.maximum(err1.mean(axis=1), 1e-12)[:, None]
        else:
            noise2 = np.full((m, 1), float(noise_variance))
        dps = all_genie_dps(g)                                  # (m, N_c, N_t)
        obs2 = np.swapaxes(est1, 1, 2)                          # (m, N_c, N_pt)
        est2, _ = _batched_lmmse(_dps_dense(dps), sym, obs2, noise2)
        out[s:s + m] = est2
    return out[0] if single else out


def estimate_pdp_dps_kron(h_true, y, pattern, noise_variance):
    """Genie 2D baseline with ``C = C^DS(mean DPS) kron C^PDP(mean PDP)``."""
    single = np.ndim(h_true) == 2
    grids = np.asarray(h_true)[None] if single else np.asarray(h_true)
    y = np.atleast_2d(y)
    n = grids.shape[0]
    p = pattern
    sym, car = list(p.pilot_symbols), list(p.pilot_carriers)
    out = np.empty_like(grids, dtype=complex)
    for s in range(0, n, _CHUNK):
        g = grids[s:s + _CHUNK]
        m = g.shape[0]
        c_freq = _pdp_dense(all_genie_pdp(g).mean(axis=1))     # (m, N_c, N_c)
        c_time = _dps_dense(all_genie_dps(g).mean(axis=1))     # (m, N_t, N_t)
        lam_t, u_t = np.linalg.eigh(c_time[:, sym][:, :, sym])
        lam_c, u_c = np.linalg.eigh(c_freq[:, car][:, :, car])
        lam = lam_t[:, :, None] * lam_c[:, None, :] + noise_variance
        ym = y[s:s + _CHUNK].reshape(m, p.n_pilot_symbols, p.n_pilot_carriers)
        z = (np.swapaxes(u_t.conj(), 1, 2) @ ym @ u_c.conj()) / lam
        z = u_t @ z @ np.swapaxes(u_c, 1, 2)                    # C_y^{-1} y as a grid
        est = c_time[:, :, sym] @ z @ np.swapaxes(c_freq[:, :, car], 1, 2)
        out[s:s + m] = np.swapaxes(est, 1, 2)
    return out[0] if single else out


def normalized_mse(truth, estimates):
    """Mean over samples of ``||h - h_hat||^2 / (N_c N_t)``."""
    truth = np.asarray(truth)
    estimates = np.asarray(estimates)
    if truth.shape != estimates.shape:
        raise ShapeError(f"shape mismatch {truth.shape} vs {estimates.shape}")
    return float(np.mean(per_sample_error(truth, estimates)))


def per_sample_error(truth, estimates):
    truth = np.asarray(truth)
    estimates = np.asarray(estimates)
    if truth.shape != estimates.shape:
        raise ShapeError(f"shape mismatch {truth.shape} vs {estimates.shape}")
    if truth.ndim == 1:
        truth, estimates = truth[None], estimates[None]
    axes = tuple(range(1, truth.ndim))
    size = int(np.prod(truth.shape[1:]))
    return np.sum(np.abs(truth - estimates) ** 2, axis=axes) / size


__all__ = [
    "BatchEstimate", "Cascade2x1D", "EstimateReport", "FittedEstimator", "build_kron_gmm",
    "estimate", "estimate_2x1d", "estimate_pdp_dps_2x1d", "estimate_pdp_dps_kron", "lmmse",
    "normalized_mse", "per_sample_error", "precompute", "truncate_posterior",
]
