"""Synthetic doubly-selective channels, pilot observation and genie profiles.

Grids are stored as complex arrays of shape ``(n_carriers, n_symbols)``;
datasets stack them as ``(n_samples, n_carriers, n_symbols)``.  The
vectorization ``vec(H)`` stacks columns (time symbols), so flat index
``t * n_carriers + c`` addresses carrier ``c`` of symbol ``t``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateDataError, FormatError, ParameterError, ShapeError
from .structured_cov import Circulant1D

SPEED_OF_LIGHT = 299_792_458.0

DATASET_MAGIC = b"GMCD"
DATASET_VERSION = 1
_DATASET_HEADER = struct.Struct("<4sIIII")

DEFAULT_PILOT_CARRIERS = (0, 2, 5, 7, 10, 12, 15, 17, 20, 23)
DEFAULT_PILOT_SYMBOLS = (0, 3, 6, 9, 13)


@dataclass(frozen=True)
class ChannelParams:
    """Scenario parameters of the synthetic multipath generator.

    Path delays are drawn from an exponential law with mean ``delay_spread``
    and path powers decay exponentially with delay.  ``velocity_range`` is
    in m/s; each generated grid draws one velocity uniformly from it.
    """

    n_carriers: int = 24
    n_symbols: int = 14
    n_paths: int = 20
    carrier_freq: float = 2.1e9
    carrier_spacing: float = 15e3
    symbol_duration: float = 71.4e-6
    velocity_range: tuple[float, float] = (0.0, 300.0 / 3.6)
    delay_spread: float = 1e-6
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_carriers < 1 or self.n_symbols < 1:
            raise ParameterError("grid dimensions must be positive")
        if self.n_paths < 1:
            raise ParameterError("n_paths must be >= 1")
        if self.carrier_spacing <= 0 or self.symbol_duration <= 0:
            raise ParameterError("carrier_spacing and symbol_duration must be > 0")
        if self.delay_spread < 0 or self.carrier_freq <= 0:
            raise ParameterError("delay_spread must be >= 0 and carrier_freq > 0")
        v_min, v_max = self.velocity_range
        if not 0 <= v_min <= v_max:
            raise ParameterError("velocity_range must satisfy 0 <= v_min <= v_max")
        object.__setattr__(self, "velocity_range", (float(v_min), float(v_max)))

    @property
    def dims(self):
        return (self.n_carriers, self.n_symbols)


@dataclass(frozen=True)
class PilotPattern:
    """Separable pilot lattice on an ``n_carriers x n_symbols`` grid.

    The selection operator ``A = A_t kron A_c`` is realized as a gather
    over :attr:`flat_indices`; :meth:`selection_matrix` materializes it for
    tests only.
    """

    pilot_carriers: tuple[int, ...]
    pilot_symbols: tuple[int, ...]
    n_carriers: int
    n_symbols: int
    flat_indices: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        carriers = tuple(int(c) for c in self.pilot_carriers)
        symbols = tuple(int(s) for s in self.pilot_symbols)
        for name, idx, bound in (("pilot_carriers", carriers, self.n_carriers),
                                 ("pilot_symbols", symbols, self.n_symbols)):
            if not idx:
                raise ParameterError(f"{name} must not be empty")
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise ParameterError(f"{name} must be strictly increasing")
            if idx[0] < 0 or idx[-1] >= bound:
                raise ParameterError(f"{name} out of range [0, {bound})")
        object.__setattr__(self, "pilot_carriers", carriers)
        object.__setattr__(self, "pilot_symbols", symbols)
        flat = (np.asarray(symbols)[:, None] * self.n_carriers
                + np.asarray(carriers)[None, :]).ravel()
        flat.setflags(write=False)
        object.__setattr__(self, "flat_indices", flat)

    @classmethod
    def full(cls, n_carriers, n_symbols):
        return cls(tuple(range(n_carriers)), tuple(range(n_symbols)), n_carriers, n_symbols)

    @classmethod
    def lattice(cls, n_carriers=24, n_symbols=14):
        """The default 10 x 5 lattice on the 24 x 14 grid."""
        return cls(DEFAULT_PILOT_CARRIERS, DEFAULT_PILOT_SYMBOLS, n_carriers, n_symbols)

    @property
    def dims(self):
        return (self.n_carriers, self.n_symbols)

    @property
    def n_pilot_carriers(self):
        return len(self.pilot_carriers)

    @property
    def n_pilot_symbols(self):
        return len(self.pilot_symbols)

    @property
    def n_pilots(self):
        return self.n_pilot_carriers * self.n_pilot_symbols

    def gather(self, h):
        """Apply the selection operator to vectorized grid(s) ``h`` (..., N)."""
        return np.asarray(h)[..., self.flat_indices]

    def selection_matrix(self):
        a_c = np.eye(self.n_carriers)[list(self.pilot_carriers)]
        a_t = np.eye(self.n_symbols)[list(self.pilot_symbols)]
        return np.kron(a_t, a_c)


@dataclass(frozen=True)
class Observation:
    y: np.ndarray
    noise_variance: float

    def __post_init__(self):
        if not (np.isfinite(self.noise_variance) and self.noise_variance > 0):
            raise ParameterError("noise_variance must be finite and > 0")


def vec(grid):
    """Column-stacking vectorization; accepts one grid or a stack of grids."""
    grid = np.asarray(grid)
    return np.swapaxes(grid, -1, -2).reshape(*grid.shape[:-2], -1)


def unvec(h, n_carriers, n_symbols):
    h = np.asarray(h)
    if h.shape[-1] != n_carriers * n_symbols:
        raise ShapeError(f"vector length {h.shape[-1]} != {n_carriers}*{n_symbols}")
    return np.swapaxes(h.reshape(*h.shape[:-1], n_symbols, n_carriers), -1, -2)


def sample_rng(seed, stream, index):
    """Independent Philox stream for sample ``index`` of ``stream``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream, index])))


def carrier_frequencies(params):
    c = np.arange(params.n_carriers)
    return params.carrier_freq + (c - (params.n_carriers - 1) / 2) * params.carrier_spacing


def channel_from_paths(params, gains, delays, angles, velocity):
    """Evaluate ``H[c, t] = sum_l G_l exp(-2j pi f_c tau_{l,t})`` for given paths.

    ``tau_{l,t} = tau_l - velocity * cos(theta_l) / c0 * t * T_s``.
    """
    gains = np.asarray(gains, dtype=complex)
    delays = np.asarray(delays, dtype=float)
    angles = np.asarray(angles, dtype=float)
    freqs = carrier_frequencies(params)
    t = np.arange(params.n_symbols) * params.symbol_duration
    drift = velocity * np.cos(angles) / SPEED_OF_LIGHT
    tau = delays[:, None] - drift[:, None] * t[None, :]  # (L, N_t)
    phase = np.exp(-2j * np.pi * freqs[None, :, None] * tau[:, None, :])  # (L, N_c, N_t)
    return np.tensordot(gains, phase, axes=(0, 0))


def generate_channel(params, velocity, rng):
    v_min, v_max = params.velocity_range
    if not v_min <= velocity <= v_max:
        raise ParameterError(f"velocity {velocity} outside {params.velocity_range}")
    n_paths = params.n_paths
    if params.delay_spread > 0:
        delays = np.sort(rng.exponential(params.delay_spread, n_paths))
        power = np.exp(-delays / params.delay_spread)
    else:
        delays = np.zeros(n_paths)
        power = np.ones(n_paths)
    power /= power.sum()
    gains = np.sqrt(power / 2) * (rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths))
    angles = rng.uniform(0.0, 2 * np.pi, n_paths)
    return channel_from_paths(params, gains, delays, angles, velocity)


def generate_dataset(params, n_samples, seed=None, stream=0):
    """Draw ``n_samples`` grids; sample ``i`` depends only on (seed, stream, i)."""
    if n_samples < 1:
        raise ParameterError("n_samples must be >= 1")
    seed = params.rng_seed if seed is None else seed
    out = np.empty((n_samples, params.n_carriers, params.n_symbols), dtype=complex)
    v_min, v_max = params.velocity_range
    for i in range(n_samples):
        rng = sample_rng(seed, stream, i)
        velocity = rng.uniform(v_min, v_max) if v_max > v_min else v_min
        out[i] = generate_channel(params, velocity, rng)
    return out


def normalize_dataset(channels, scale=None):
    """Scale grids so that the empirical mean of ``||h||^2`` equals ``N_c * N_t``.

    Returns ``(scaled, scale)``.  Passing ``scale`` applies a previously
    computed factor (e.g. the training-set factor to a test set).
    """
    channels = np.asarray(channels, dtype=complex)
    if channels.ndim == 2:
        channels = channels[None]
    if channels.ndim != 3 or channels.shape[0] == 0:
        raise ShapeError("expected a non-empty stack of grids")
    if scale is None:
        energy = np.mean(np.sum(np.abs(channels) ** 2, axis=(1, 2)))
        if energy <= 0:
            raise DegenerateDataError("dataset has zero energy")
        scale = float(np.sqrt(channels.shape[1] * channels.shape[2] / energy))
    return channels * scale, scale


def apply_pilots(grid, pattern, noise_variance, rng):
    """Noisy pilot observation ``y = A vec(H) + n`` of a single grid."""
    if not noise_variance > 0:
        raise ParameterError("noise_variance must be > 0")
    h = vec(grid)
    y = pattern.gather(h)
    noise = np.sqrt(noise_variance / 2) * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
    return Observation(y + noise, float(noise_variance))


def observe(channels, pattern, noise_variance, noise=None, rng=None):
    """Batch version of :func:`apply_pilots`.

    ``noise`` may carry pre-drawn unit-variance complex noise of shape
    ``(n, N_p)``; it is scaled by ``sqrt(noise_variance)``.
    """
    y = pattern.gather(vec(channels))
    if noise is None:
        rng = np.random.default_rng() if rng is None else rng
        noise = (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)) / np.sqrt(2)
    return y + np.sqrt(noise_variance) * noise


def unit_noise(shape, rng):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def genie_pdp(grid, i):
    """Instantaneous power delay profile ``|F^H h_i|^2`` of symbol ``i``."""
    grid = np.asarray(grid)
    if not 0 <= i < grid.shape[-1]:
        raise ParameterError(f"symbol index {i} out of range")
    return np.abs(np.fft.ifft(grid[..., :, i], norm="ortho")) ** 2


def genie_dps(grid, k):
    """Instantaneous Doppler power spectrum ``|F g_k|^2`` of carrier ``k``."""
    grid = np.asarray(grid)
    if not 0 <= k < grid.shape[-2]:
        raise ParameterError(f"carrier index {k} out of range")
    return np.abs(np.fft.fft(grid[..., k, :], norm="ortho")) ** 2


def all_genie_pdp(grid):
    """PDPs of every symbol, shape (..., N_t, N_c)."""
    return np.abs(np.fft.ifft(np.swapaxes(np.asarray(grid), -1, -2), axis=-1, norm="ortho")) ** 2


def all_genie_dps(grid):
    """DPSs of every carrier, shape (..., N_c, N_t)."""
    return np.abs(np.fft.fft(np.asarray(grid), axis=-1, norm="ortho")) ** 2


def pdp_to_cov(p):
    """Frequency covariance ``F diag(p) F^H`` as a circulant model.

    Circulant models are stored as ``F^H diag(c) F``; the two forms differ
    by the index reversal ``c[m] = p[-m mod N]``.
    """
    p = np.asarray(p, dtype=float)
    if np.any(p < 0):
        raise ParameterError("power delay profile must be non-negative")
    return Circulant1D(np.roll(p[::-1], 1))


def dps_to_cov(d):
    """Time covariance ``F^H diag(d) F`` as a circulant model."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ParameterError("Doppler spectrum must be non-negative")
    return Circulant1D(d.copy())


def save_dataset(path, channels):
    """Write grids in the little-endian binary dataset format.

    Header: magic, version, N_c, N_t, count (uint32); then every grid as
    interleaved real/imaginary float64 in column-major order.
    """
    channels = np.asarray(channels, dtype=complex)
    if channels.ndim == 2:
        channels = channels[None]
    n, n_c, n_t = channels.shape
    payload = np.ascontiguousarray(vec(channels)).astype("<c16")
    with open(path, "wb") as fh:
        fh.write(_DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n_c, n_t, n))
        fh.write(payload.tobytes())


def load_dataset(path):
    raw = Path(path).read_bytes()
    if len(raw) < _DATASET_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n_c, n_t, n = _DATASET_HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _DATASET_HEADER.size + 16 * n * n_c * n_t
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    flat = np.frombuffer(raw, dtype="<c16", offset=_DATASET_HEADER.size).astype(complex)
    return unvec(flat.reshape(n, n_c * n_t), n_c, n_t)
