"""Experiment configuration: an INI file with one section per concern.

Sections: ``[scenario]``, ``[pilots]``, ``[experiment]``, ``[em]`` and
optional ``[estimator.<name>]`` overrides.  Unknown sections and keys are
rejected with the dotted path of the offending field.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from ..channel_sim import ChannelParams, PilotPattern
from ..errors import ConfigError, GmmChanError
from ..gmm_em import EmConfig

ESTIMATORS = ("full", "kron", "b-toep", "b-circ", "2x1d", "2x1d-toep", "2x1d-circ",
              "pdp-dps-2x1d", "pdp-dps-kron")
GMM_ESTIMATORS = ESTIMATORS[:7]
GENIE_ESTIMATORS = ESTIMATORS[7:]

# constraint used for the fitted models of each GMM estimator
CONSTRAINT = {"full": "full", "kron": "full", "b-toep": "toeplitz", "b-circ": "circulant",
              "2x1d": "full", "2x1d-toep": "toeplitz", "2x1d-circ": "circulant"}
ONE_DIMENSIONAL = ("kron", "2x1d", "2x1d-toep", "2x1d-circ")

# iteration caps that keep a desk-scale run within minutes; the 1D Toeplitz
# and circulant fits gain little after about 20 iterations
ITERATION_CAPS = {"full": 20, "b-toep": 20, "kron": 20, "2x1d": 20, "2x1d-toep": 20, "2x1d-circ": 20}
DEFAULT_CARRIERS = (0, 2, 5, 7, 10, 12, 15, 17, 20, 23)
DEFAULT_SYMBOLS = (0, 3, 6, 9, 13)
KMH_PER_MS = 3.6


def kron_pair(k):
    """``(K_t, K_c)`` for the Kronecker model: ``K_t = 2^floor(log2(K) / 2)``, product ``K``."""
    k_t = 1
    while (k_t * 2) ** 2 <= k:
        k_t *= 2
    return k_t, max(1, k // k_t)


def cascade_pair(k):
    """``(K_t, K_c)`` for the 2x1D model: a quarter in time, the rest in frequency."""
    k_t = max(1, k // 4)
    return k_t, max(1, k - k_t)


@dataclass(frozen=True)
class EstimatorSpec:
    name: str
    n_components: int | None = None
    k_time: int | None = None
    k_freq: int | None = None
    max_iters: int | None = None
    rel_tol: float | None = None
    order: str = "freq_first"
    stage2_noise: str = "posterior"

    def components(self, k_default):
        """Resolved ``(K,)`` for 2D models or ``(K_t, K_c)`` for 1D pairs."""
        k = self.n_components or k_default
        if self.name == "kron":
            pair = kron_pair(k)
        elif self.name in ONE_DIMENSIONAL:
            pair = cascade_pair(k)
        else:
            return (k,)
        return (self.k_time or pair[0], self.k_freq or pair[1])


def default_specs():
    return {name: EstimatorSpec(name, max_iters=cap) for name, cap in ITERATION_CAPS.items()}


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ChannelParams = field(default_factory=ChannelParams)
    pilot_carriers: tuple = DEFAULT_CARRIERS
    pilot_symbols: tuple = DEFAULT_SYMBOLS
    estimators: tuple = ESTIMATORS
    estimator_specs: dict = field(default_factory=lambda: default_specs())
    snr_db: tuple = (-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
    n_train: int = 10_000
    n_test: int = 2_000
    rho: float = 0.99
    seed: int = 0
    train_sizes: tuple = (100, 1_000, 10_000)
    component_grid: tuple = (1, 2, 4, 8, 16)
    sweep_snr_db: float = 10.0
    em: EmConfig = field(default_factory=lambda: EmConfig(16))
    out_dir: str = "out"

    def __post_init__(self):
        if not self.snr_db:
            raise ConfigError("SNR grid must be non-empty", "experiment.snr_db")
        for name in self.estimators:
            if name not in ESTIMATORS:
                raise ConfigError(f"unknown estimator {name!r}", "experiment.estimators")
        if self.n_test < 1:
            raise ConfigError("must be >= 1", "experiment.n_test")
        if not 0 < self.rho <= 1:
            raise ConfigError("must lie in (0, 1]", "experiment.rho")
        if self.n_train < self.largest_k():
            raise ConfigError(f"{self.n_train} samples cannot train {self.largest_k()} components",
                              "experiment.n_train")
        if any(n < 1 for n in self.train_sizes):
            raise ConfigError("sizes must be >= 1", "experiment.train_sizes")
        if any(k < 1 for k in self.component_grid):
            raise ConfigError("component counts must be >= 1", "experiment.component_grid")
        try:
            self.pattern
        except GmmChanError as exc:
            raise ConfigError(str(exc), "pilots") from None

    @property
    def pattern(self):
        return PilotPattern(self.pilot_carriers, self.pilot_symbols,
                            self.scenario.n_carriers, self.scenario.n_symbols)

    def spec(self, name):
        return self.estimator_specs.get(name, EstimatorSpec(name))

    def largest_k(self):
        ks = [1]
        for name in self.estimators:
            if name in GMM_ESTIMATORS and name not in ONE_DIMENSIONAL:
                ks.extend(self.spec(name).components(self.em.n_components))
        return max(ks)

    def em_for(self, name, n_components):
        spec = self.spec(name)
        return replace(self.em, n_components=n_components,
                       max_iters=spec.max_iters or self.em.max_iters,
                       rel_tol=spec.rel_tol or self.em.rel_tol)

    def with_overrides(self, seed=None, out_dir=None):
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed), scenario=replace(cfg.scenario, rng_seed=int(seed)))
        if out_dir is not None:
            cfg = replace(cfg, out_dir=str(out_dir))
        return cfg

    def fingerprint(self, *extra):
        """Stable hash of everything that determines a fitted model."""
        payload = {"scenario": asdict(self.scenario), "em": asdict(self.em), "seed": self.seed,
                   "n_train": self.n_train, "extra": [str(e) for e in extra]}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# INI parsing.

_SCENARIO_KEYS = {
    "n_carriers": int, "n_symbols": int, "n_paths": int, "carrier_freq": float,
    "carrier_spacing": float, "symbol_duration": float, "velocity_min_kmh": float,
    "velocity_max_kmh": float, "delay_spread": float,
}
_EXPERIMENT_KEYS = {
    "estimators": "names", "snr_db": "floats", "n_train": int, "n_test": int, "rho": float,
    "seed": int, "train_sizes": "ints", "component_grid": "ints", "sweep_snr_db": float,
}
_EM_KEYS = {"n_components": int, "max_iters": int, "rel_tol": float, "init": str,
            "spectral_floor": float, "loading": float}
_ESTIMATOR_KEYS = {"n_components": int, "k_time": int, "k_freq": int, "max_iters": int,
                   "rel_tol": float, "order": str, "stage2_noise": str}


def _convert(kind, raw, path):
    try:
        if kind == "names":
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        if kind == "floats":
            return tuple(float(s) for s in raw.split(",") if s.strip())
        if kind == "ints":
            return tuple(int(s) for s in raw.split(",") if s.strip())
        if kind is int:
            return int(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r}", path) from None


def _section(parser, name, keys):
    out = {}
    if not parser.has_section(name):
        return out
    for key, raw in parser.items(name):
        path = f"{name}.{key}"
        if key not in keys:
            raise ConfigError("unknown key", path)
        out[key] = _convert(keys[key], raw, path)
    return out


def parse_config(text):
    """Build an :class:`ExperimentConfig` from INI text."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], "<file>") from None
    for name in parser.sections():
        if name not in ("scenario", "pilots", "experiment", "em") and not name.startswith("estimator."):
            raise ConfigError("unknown section", name)

    kwargs = {}
    sc = _section(parser, "scenario", _SCENARIO_KEYS)
    v_min = sc.pop("velocity_min_kmh", 0.0)
    v_max = sc.pop("velocity_max_kmh", 300.0)
    ex = _section(parser, "experiment", _EXPERIMENT_KEYS)
    try:
        kwargs["scenario"] = ChannelParams(**sc, velocity_range=(v_min / KMH_PER_MS, v_max / KMH_PER_MS),
                                           rng_seed=ex.get("seed", 0))
    except GmmChanError as exc:
        raise ConfigError(str(exc), "scenario") from None

    pilots = _section(parser, "pilots", {"carriers": "ints", "symbols": "ints"})
    if "carriers" in pilots:
        kwargs["pilot_carriers"] = pilots["carriers"]
    if "symbols" in pilots:
        kwargs["pilot_symbols"] = pilots["symbols"]
    kwargs.update(ex)

    em = _section(parser, "em", _EM_KEYS)
    try:
        kwargs["em"] = EmConfig(**{"n_components": 16, "rng_seed": ex.get("seed", 0), **em})
    except GmmChanError as exc:
        raise ConfigError(str(exc), "em") from None

    specs = default_specs()
    for name in parser.sections():
        if not name.startswith("estimator."):
            continue
        est = name.split(".", 1)[1]
        if est not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {est!r}", name)
        values = _section(parser, name, _ESTIMATOR_KEYS)
        if values.get("order", "freq_first") not in ("freq_first", "time_first"):
            raise ConfigError("must be freq_first or time_first", f"{name}.order")
        if values.get("stage2_noise", "posterior") not in ("posterior", "sigma2"):
            raise ConfigError("must be posterior or sigma2", f"{name}.stage2_noise")
        for key in ("n_components", "k_time", "k_freq", "max_iters"):
            if key in values and values[key] < 1:
                raise ConfigError("must be >= 1", f"{name}.{key}")
        base = asdict(specs.get(est, EstimatorSpec(est)))
        specs[est] = EstimatorSpec(**{**base, **values})
    kwargs["estimator_specs"] = specs
    return ExperimentConfig(**kwargs)


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return parse_config(text)
