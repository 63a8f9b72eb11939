"""Experiment drivers: dataset handling, model fitting with caching, sweeps and CSV output."""

from __future__ import annotations

import csv
import logging
from fractions import Fraction
from pathlib import Path

import numpy as np

from ..channel_sim import (
    generate_dataset,
    load_dataset,
    normalize_dataset,
    observe,
    sample_rng,
    save_dataset,
    unit_noise,
    vec,
)
from ..errors import FormatError
from ..estimators import (
    Cascade2x1D,
    build_kron_gmm,
    estimate_pdp_dps_2x1d,
    estimate_pdp_dps_kron,
    per_sample_error,
    precompute,
)
from ..gmm_em import fit, fit_time_and_freq, load_model, save_model
from .config import CONSTRAINT, GENIE_ESTIMATORS, GMM_ESTIMATORS, ONE_DIMENSIONAL, kron_pair, cascade_pair

log = logging.getLogger(__name__)

TRAIN_STREAM, TEST_STREAM, NOISE_STREAM = 0, 1, 2

# printed example values that differ from their own formula at N_c=24, N_t=14, K=128
REFERENCE_EXAMPLE = {"full": "7.29e6", "kron": "5.78e3", "2x1d": "3.39e4"}
REFERENCE_DIMS = (24, 14, 128)


def noise_variance(snr_db):
    return 10.0 ** (-snr_db / 10.0)


# --------------------------------------------------------------------------
# Data.


def make_datasets(cfg, n_train=None):
    """Normalized train and test grids; the test set uses the training scale."""
    n_train = cfg.n_train if n_train is None else n_train
    train, scale = normalize_dataset(generate_dataset(cfg.scenario, n_train, cfg.seed, TRAIN_STREAM))
    test, _ = normalize_dataset(generate_dataset(cfg.scenario, cfg.n_test, cfg.seed, TEST_STREAM), scale)
    return train, test


def generate_files(cfg):
    out = Path(cfg.out_dir) / "data"
    out.mkdir(parents=True, exist_ok=True)
    train, test = make_datasets(cfg)
    save_dataset(out / "train.gmcd", train)
    save_dataset(out / "test.gmcd", test)
    return out / "train.gmcd", out / "test.gmcd"


def pilot_noise(cfg):
    """Unit-variance pilot noise drawn once and rescaled for every SNR."""
    return unit_noise((cfg.n_test, cfg.pattern.n_pilots), sample_rng(cfg.seed, NOISE_STREAM, 0))


# --------------------------------------------------------------------------
# Fitting with a file cache.


class ModelCache:
    """Fitted models stored as ``<dir>/<name>-<hash>[-part].gmcm``."""

    def __init__(self, directory):
        self.dir = None if directory is None else Path(directory)

    def path(self, key, part):
        return self.dir / f"{key}-{part}.gmcm"

    def get(self, key, parts):
        if self.dir is None:
            return None
        paths = [self.path(key, p) for p in parts]
        if not all(p.exists() for p in paths):
            return None
        try:
            return [load_model(p) for p in paths]
        except FormatError as exc:
            log.warning("ignoring unreadable cached model: %s", exc)
            return None

    def put(self, key, parts, models):
        if self.dir is None:
            return
        self.dir.mkdir(parents=True, exist_ok=True)
        for part, model in zip(parts, models):
            save_model(self.path(key, part), model)


def fit_estimator(cfg, name, train, n_components=None, cache=None):
    """Fitted models for one GMM estimator.

    Returns a dict with ``model`` (2D estimators, kron) or ``freq``/``time``
    (cascades).  ``n_components`` overrides the configured total ``K``.
    """
    spec = cfg.spec(name)
    k_total = n_components or spec.n_components or cfg.em.n_components
    if n_components is not None:
        pair = kron_pair(k_total) if name == "kron" else cascade_pair(k_total)
        comps = (k_total,) if name not in ONE_DIMENSIONAL else pair
    else:
        comps = spec.components(cfg.em.n_components)
    constraint = CONSTRAINT[name]
    n_train = train.shape[0]
    key = f"{name}-" + cfg.fingerprint(name, comps, n_train, constraint)
    cache = cache or ModelCache(None)
    parts = ("model",) if name not in ("2x1d", "2x1d-toep", "2x1d-circ") else ("time", "freq")
    cached = cache.get(key, parts)
    if cached is not None:
        log.info("loaded cached %s models (%s)", name, key)
        return dict(zip(parts, cached))

    log.info("fitting %s with components %s on %d samples", name, comps, n_train)
    if name in ONE_DIMENSIONAL:
        k_t, k_c = comps
        gmm_t, gmm_c = fit_time_and_freq(train, cfg.em_for(name, k_t), cfg.em_for(name, k_c), constraint)
        models = [build_kron_gmm(gmm_t, gmm_c, vec(train))] if name == "kron" else [gmm_t, gmm_c]
    else:
        result = fit(vec(train), cfg.em_for(name, comps[0]), constraint, dims=train.shape[1:])
        models = [result.model]
    cache.put(key, parts, models)
    return dict(zip(parts, models))


def fit_and_cache_models(cfg, train=None, names=None, n_components=None, cache_dir=None):
    """Fit (or load) every configured GMM estimator; returns ``{name: models}``."""
    names = [n for n in (names or cfg.estimators) if n in GMM_ESTIMATORS]
    if train is None:
        train, _ = make_datasets(cfg)
    cache = ModelCache(Path(cfg.out_dir) / "models" if cache_dir is None else cache_dir)
    return {name: fit_estimator(cfg, name, train, n_components, cache) for name in names}


# --------------------------------------------------------------------------
# Evaluation.


def run_estimator(cfg, name, models, test, y, sigma2):
    """Estimates ``(n, N)`` and component counts (``None`` for genie baselines)."""
    pattern = cfg.pattern
    spec = cfg.spec(name)
    if name in GENIE_ESTIMATORS:
        if name == "pdp-dps-2x1d":
            grids = estimate_pdp_dps_2x1d(test, y, pattern, sigma2, spec.stage2_noise)
        else:
            grids = estimate_pdp_dps_kron(test, y, pattern, sigma2)
        return vec(grids), None
    if "model" in models:
        res = precompute(models["model"], pattern, sigma2, cfg.rho).estimate_batch(y)
        return res.h_hat, res.components_used
    cascade = Cascade2x1D(models["freq"], models["time"], pattern, sigma2, spec.order, cfg.rho,
                          spec.stage2_noise)
    grids, counts = cascade.estimate_batch(y)
    return vec(grids), counts


def evaluate(cfg, fitted, test, snrs, names=None):
    """Per-estimator MSE, its standard error and mean component counts at every SNR."""
    names = names or cfg.estimators
    h = vec(test)
    noise = pilot_noise(cfg)
    mse = {n: [] for n in names}
    se = {n: [] for n in names}
    counts = {n: [] for n in names if n in GMM_ESTIMATORS}
    for snr in snrs:
        sigma2 = noise_variance(snr)
        y = observe(test, cfg.pattern, sigma2, noise=noise)
        for name in names:
            est, used = run_estimator(cfg, name, fitted.get(name, {}), test, y, sigma2)
            err = per_sample_error(h, est)
            mse[name].append(float(np.mean(err)))
            se[name].append(float(np.std(err, ddof=1) / np.sqrt(err.size)) if err.size > 1 else 0.0)
            if used is not None:
                counts[name].append(float(np.mean(used)))
    return mse, se, counts


def write_csv(path, first, rows, columns, table):
    """Header ``first,<columns>``; one row per sweep value; floats in ``.17g``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([first, *columns])
        for i, value in enumerate(rows):
            writer.writerow([_fmt(value), *(_fmt(table[c][i]) for c in columns)])
    return path


def _fmt(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def read_csv(path):
    """``(first_column_name, rows, {column: values})`` of a harness CSV."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = [[float(v) for v in row] for row in reader]
    arr = np.array(data) if data else np.empty((0, len(header)))
    return header[0], arr[:, 0], {name: arr[:, i + 1] for i, name in enumerate(header[1:])}


# --------------------------------------------------------------------------
# Sweeps.


def _out(cfg, name):
    return Path(cfg.out_dir) / name


def run_mse_sweep(cfg, fitted=None, data=None):
    """MSE versus SNR; writes ``mse.csv`` and ``mse_se.csv``; returns ``(mse, se, counts)``."""
    train, test = data or make_datasets(cfg)
    fitted = fitted if fitted is not None else fit_and_cache_models(cfg, train)
    mse, se, counts = evaluate(cfg, fitted, test, cfg.snr_db)
    write_csv(_out(cfg, "mse.csv"), "SNR", cfg.snr_db, cfg.estimators, mse)
    write_csv(_out(cfg, "mse_se.csv"), "SNR", cfg.snr_db, cfg.estimators, se)
    return mse, se, counts


def run_responsibility_count(cfg, fitted=None, data=None):
    """Mean number of components reaching ``rho`` responsibility; writes ``resp_count.csv``."""
    train, test = data or make_datasets(cfg)
    names = [n for n in cfg.estimators if n in GMM_ESTIMATORS]
    fitted = fitted if fitted is not None else fit_and_cache_models(cfg, train, names)
    _, _, counts = evaluate(cfg, fitted, test, cfg.snr_db, names)
    write_csv(_out(cfg, "resp_count.csv"), "SNR", cfg.snr_db, names, counts)
    return counts


def run_training_size_sweep(cfg):
    """MSE versus training-set size at ``sweep_snr_db``; writes ``train_sweep.csv`` (+ ``_se``).

    Smaller sets are prefixes of the largest one; everything shares the
    scale of the configured training set so the test data is identical.
    """
    n_max = max(max(cfg.train_sizes), cfg.n_train)
    raw = generate_dataset(cfg.scenario, n_max, cfg.seed, TRAIN_STREAM)
    _, scale = normalize_dataset(raw[:cfg.n_train])
    pool, _ = normalize_dataset(raw, scale)
    _, test = make_datasets(cfg)
    mse = {n: [] for n in cfg.estimators}
    se = {n: [] for n in cfg.estimators}
    cache = ModelCache(_out(cfg, "models"))
    for n_train in cfg.train_sizes:
        train = pool[:n_train]
        fitted = {n: fit_estimator(cfg, n, train, cache=cache) for n in cfg.estimators
                  if n in GMM_ESTIMATORS}
        m, s, _ = evaluate(cfg, fitted, test, [cfg.sweep_snr_db])
        for n in cfg.estimators:
            mse[n].extend(m[n])
            se[n].extend(s[n])
    write_csv(_out(cfg, "train_sweep.csv"), "n_train", cfg.train_sizes, cfg.estimators, mse)
    write_csv(_out(cfg, "train_sweep_se.csv"), "n_train", cfg.train_sizes, cfg.estimators, se)
    return mse, se


def run_component_sweep(cfg, data=None):
    """MSE versus total component count at ``sweep_snr_db``; writes ``component_sweep.csv`` (+ ``_se``)."""
    train, test = data or make_datasets(cfg)
    names = [n for n in cfg.estimators if n in GMM_ESTIMATORS]
    mse = {n: [] for n in names}
    se = {n: [] for n in names}
    cache = ModelCache(_out(cfg, "models"))
    for k in cfg.component_grid:
        fitted = {n: fit_estimator(cfg, n, train, n_components=k, cache=cache) for n in names}
        m, s, _ = evaluate(cfg, fitted, test, [cfg.sweep_snr_db], names)
        for n in names:
            mse[n].extend(m[n])
            se[n].extend(s[n])
    write_csv(_out(cfg, "component_sweep.csv"), "n_components", cfg.component_grid, names, mse)
    write_csv(_out(cfg, "component_sweep_se.csv"), "n_components", cfg.component_grid, names, se)
    return mse, se


# --------------------------------------------------------------------------
# Parameter counts.


def parameter_counts(n_c, n_t, k, k_kron, k_cascade):
    """Exact parameter counts of each GMM estimator as :class:`Fraction` values.

    ``k_kron`` and ``k_cascade`` are ``(K_t, K_c)`` pairs.
    """
    half = Fraction(1, 2)
    n = n_c * n_t

    def pair(k_pair, per_c, per_t):
        k_t, k_c = k_pair
        return k_c * per_c + k_t * per_t

    one_d_full = (half * n_c**2 + 2 * n_c + 1, half * n_t**2 + 2 * n_t + 1)
    return {
        "full": k * (half * n**2 + 2 * n + 1),
        "kron": pair(k_kron, *one_d_full),
        "b-toep": Fraction(k * (5 * n + 1)),
        "b-circ": Fraction(k * (2 * n + 1)),
        "2x1d": pair(k_cascade, *one_d_full),
        "2x1d-toep": Fraction(pair(k_cascade, 5 * n_c + 1, 5 * n_t + 1)),
        "2x1d-circ": Fraction(pair(k_cascade, 2 * n_c + 1, 2 * n_t + 1)),
    }


def report_param_counts(cfg):
    """Integer parameter counts; writes ``param_counts.csv`` and returns its rows.

    Non-integer formula values are rounded up and flagged.  Where the grid and
    ``K`` equal the reference example, the printed example value of that
    configuration is listed when it disagrees with the formula.
    """
    n_c, n_t = cfg.scenario.n_carriers, cfg.scenario.n_symbols
    k = cfg.spec("full").components(cfg.em.n_components)[0]
    counts = parameter_counts(n_c, n_t, k, cfg.spec("kron").components(k),
                              cfg.spec("2x1d").components(k))
    at_reference = (n_c, n_t, k) == REFERENCE_DIMS
    rows = []
    for name, value in counts.items():
        rounded = -(-value.numerator // value.denominator)
        note = ""
        if at_reference and name in REFERENCE_EXAMPLE:
            note = f"formula value; printed reference example {REFERENCE_EXAMPLE[name]} disagrees"
        rows.append({"estimator": name, "parameters": rounded, "exact": str(value),
                     "rounded_up": "yes" if value.denominator != 1 else "no", "note": note})
    path = _out(cfg, "param_counts.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, ["estimator", "parameters", "exact", "rounded_up", "note"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


def load_datasets(cfg):
    """Datasets written by ``generate`` if present, else freshly generated."""
    data = Path(cfg.out_dir) / "data"
    if (data / "train.gmcd").exists() and (data / "test.gmcd").exists():
        return load_dataset(data / "train.gmcd"), load_dataset(data / "test.gmcd")
    return make_datasets(cfg)


__all__ = [
    "ModelCache", "evaluate", "fit_and_cache_models", "fit_estimator", "generate_files",
    "load_datasets", "make_datasets", "noise_variance", "pilot_noise", "parameter_counts", "read_csv",
    "report_param_counts", "run_component_sweep", "run_estimator", "run_mse_sweep",
    "run_responsibility_count", "run_training_size_sweep", "write_csv",
]
