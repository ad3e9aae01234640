"""Solve finite-state mean-field games and learn their flow maps with ReLU networks."""

from .core import (
    CFLError,
    ConvergenceError,
    MfgError,
    MfgModel,
    SimplexDist,
    SimplexError,
    StateSpace,
    TimeGrid,
    check_lasry_lions,
    discrete_gradient,
    extended_hamiltonian,
    project_to_simplex,
    selector_gradient_consistency,
)
from .models import ConfigError, CyberModel, CyberRates, QuadraticModel, model_digest, model_from_dict
from .nn import MlpParams, init_params, loss_and_grad, mlp_forward, weight_bound
from .pipeline import (
    TrainConfig,
    evaluate_flow_map,
    evaluate_reconstruction,
    generate_dataset,
    read_dataset,
    sample_kappa,
    sample_simplex,
    train_flow_map,
    width_sweep,
    write_dataset,
)
from .solver import (
    PicardConfig,
    hjb_backward_sweep,
    kfp_forward_sweep,
    kfp_reconstruct,
    picard_solve,
    picard_solve_batch,
    stability_probe,
)

__version__ = "0.1.0"
