"""Decentralized simultaneous-perturbation gradient descent over lossy networks."""

from .config import ExperimentConfig, config_from_dict, load_config
from .consensus import (
    ConsensusMailbox,
    GradShare,
    compound_staleness_moments,
    compute_shares,
    consensus_update,
    run_consensus,
    simulate_consensus_batch,
)
from .errors import (
    ConfigError,
    DSPGError,
    EnumerationLimitError,
    InvalidAgentError,
    InvalidDimensionError,
    NumericalOverflowError,
    UnsupportedOperationError,
)
from .estimator import (
    EstimatorDiagnostics,
    dspg_estimate,
    enumerate_diagnostics,
    estimator_lipschitz_check,
    sample_perturbation,
    spsa_classic_step,
)
from .network import (
    ChannelConfig,
    DeliveryRecord,
    Mailbox,
    stale_view,
    staleness_error,
    staleness_series,
    tick_deliveries,
)
from .objective import (
    ObjectiveSet,
    QuadraticObjectives,
    QuadraticSpec,
    analytic_gradient,
    evaluate,
    make_quadratic_set,
    make_quartic_1d,
)
from .runtime import (
    ActivationPolicy,
    AgentState,
    StepSchedule,
    Trace,
    agent_update,
    run_simulation,
    simulate_dspg_batch,
    staleness_decay_report,
    step_size,
)

__version__ = "0.1.0"
