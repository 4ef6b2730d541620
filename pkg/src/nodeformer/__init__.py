"""ODE-based and vanilla Transformer encoders with a parity experiment bench."""

from .autodiff import (
    ContractError,
    DimensionError,
    NumericError,
    ParameterSet,
    Tape,
    Tensor,
    backward,
    no_grad,
)
from .data import gen_dataset, parity_oracle
from .layers import ConfigError
from .model import ModelConfig, TransformerClassifier, residual_decay_probe
from .odeint import (
    DivergenceError,
    SolveStats,
    SolverConfig,
    SolverError,
    StiffnessError,
    convergence_order_probe,
    solve_adaptive,
    solve_euler_fixed,
)
from .training import (
    EnsembleSummary,
    RunRecord,
    TrainConfig,
    Trainer,
    lambda_sweep,
    run_ensemble,
    train_run,
)

__version__ = "0.1.0"
