"""gridweave: deterministic cross-lab co-simulation orchestration.

A scenario document describes labs, components, and links; the planner
compiles it into per-lab execution plans; the kernel runs everything under
conservative time synchronization with emulated communication channels,
either in one process or federated over TCP.
"""

from .bus import (
    AdaptFailure,
    ChannelModel,
    ChannelState,
    Envelope,
    adapt,
    next_f64,
    route,
)
from .components import (
    DEFAULT_REGISTRY,
    BadGrid,
    Diverged,
    GridModel,
    Injection,
    LoadProfile,
    PvParams,
    bfs_powerflow,
    profile_step,
    pv_power,
    volt_var,
)
from .kernel import (
    FederateContract,
    Kernel,
    StepFailure,
    Trace,
    TraceRecord,
    lbts,
)
from .plan import (
    AdapterSpec,
    CompileError,
    ExecutionPlan,
    FederationTopology,
    NoAdapter,
    Route,
    assign_master,
    compile_plans,
    select_adapter,
)
from .scenario import (
    ComponentDecl,
    LabDecl,
    LinkDecl,
    PortDecl,
    RunConfig,
    ScenarioModel,
    SchemaError,
    ScenarioSyntaxError,
    Violation,
    layer_view,
    parse_scenario,
    serialize_scenario,
    validate,
)

__version__ = "0.1.0"
