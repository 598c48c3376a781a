"""Unsupervised nonlinear hyperspectral unmixing.

Latent-variable estimation with a quadratic feature map and marginalized
spectral map, minimum-volume simplex scaling to abundances, GP endmember
extraction, plus a synthetic scene generator and linear baselines (VCA,
FCLS) for benchmarking.
"""

from .baselines import fcls, simplex_lstsq, vca
from .core import (
    AbundanceMatrix,
    EndmemberSet,
    HyperImage,
    center,
    load_matrix,
    save_matrix,
    uncenter,
)
from .embed import LleWeights, PcaBasis, init_latents, lle_weights, pca_basis
from .gpregress import GpPredictor, confidence95, extract_endmembers, predict_spectrum
from .metrics import align_columns, are, rnmse, sam
from .model import (
    FitReport,
    LatentState,
    ModelContext,
    WoodburyError,
    WoodburySolver,
    feature_dim,
    grad_neg_log_posterior,
    initial_state,
    latent_noise_scale,
    map_P,
    neg_log_posterior,
    psi,
    psi_batch,
    psi_jacobian,
    reconstruct,
    scg_optimize,
)
from .pipeline import ExperimentConfig, Report, parse_config, run_pipeline
from .scaling import SimplexFit, constrained_latents, fit_min_volume_simplex
from .scene import (
    Scene,
    SceneRecipe,
    add_noise,
    default_recipe,
    gamma_matrix,
    generate_scene,
    mix,
    sample_abundances,
    synth_endmembers,
)

__version__ = "0.1.0"
