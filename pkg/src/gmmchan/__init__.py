"""GMM-based conditional-mean estimation of OFDM channels with structured covariances."""

from .channel_sim import (
    ChannelParams, Observation, PilotPattern, apply_pilots, generate_channel,
    generate_dataset, genie_dps, genie_pdp, load_dataset, normalize_dataset, observe,
    save_dataset, unvec, vec,
)
from .errors import GmmChanError
from .estimators import (
    Cascade2x1D, FittedEstimator, build_kron_gmm, estimate, estimate_2x1d,
    estimate_pdp_dps_2x1d, estimate_pdp_dps_kron, normalized_mse, precompute,
)
from .gmm_em import EmConfig, FitResult, GmmModel, fit, fit_time_and_freq, load_model, save_model

__version__ = "0.1.0"
