"""Distributed inverter VAR control on radial feeders, with a constant-injection attack model."""
from .agents import (
    AgentState,
    AttackSpec,
    Message,
    ProtocolError,
    SimulationTrace,
    TraceRecord,
    broadcast,
    converged,
    init_agents,
    local_update,
    run_simulation,
    start_simulation,
    step_round,
)
from .estimator import VarController
from .feeder import (
    CycleError,
    DisconnectedNodeError,
    DuplicateEdgeError,
    FeederError,
    FeederGraph,
    GridMatrices,
    HomogeneityError,
    ImpedanceError,
    UnknownNodeError,
    build_grid_matrices,
    homogeneity_ratio,
    make_feeder,
    parse_feeder,
    reduced_incidence,
    two_hop_neighbors,
)
from .gridmodel import (
    CurtailmentResult,
    GridCase,
    InfeasibleOperatingPoint,
    InverterSpec,
    apply_var_priority,
    branch_flows,
    nodal_voltages,
    reactive_capability,
)
from .optim import (
    DualPoint,
    ExtrapolationPoint,
    KktReport,
    QpBounds,
    StopRule,
    default_step_size,
    dual_gradient,
    dual_value,
    extrapolate,
    fista_solve,
    kkt_residuals,
    momentum_next,
    primal_value,
    prox_project,
    recover_q,
    solve_centralized,
)
from .scenario import ScenarioError, SimulationConfig, config_from_dict, config_to_dict, load_config

__version__ = "0.1.0"
