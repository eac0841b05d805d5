"""Multi-lane traffic simulation with shielded multi-agent actor-critic
lane-change planning and V2V shared perception."""

from .world import (
    Action,
    ConfigurationError,
    OcclusionZone,
    RoadConfig,
    RosterEntry,
    ScenarioSpec,
    Topology,
    VehicleKind,
    VehicleState,
    WorldState,
    forward_gap,
    immediate_follower,
    immediate_leader,
    init_world,
    wrap_pos,
)
from .traffic import (
    IdmParams,
    LaneChangeParams,
    TrafficParams,
    detect_collisions,
    hdv_decide,
    idm_accel,
    step,
)
from .safety import SafetyParams, SafetyVerdict, is_safe, phi
from .perception import (
    HistoryBuffer,
    NeighborFeature,
    Observation,
    PerceptionConfig,
    assemble,
    push_history,
    sense,
    share_graph,
    visible,
)
from .marl import (
    ReplayBuffer,
    TrainConfig,
    Trainer,
    comfort,
    global_reward,
    soft_update,
)
from .harness import (
    ExperimentKind,
    ExperimentSpec,
    load_config,
    run_density_sweep,
    run_eval,
    run_headway_trace,
    run_obstacle_corner,
    run_ratio_sweep,
    run_train,
    save_config,
)

__version__ = "0.1.0"
