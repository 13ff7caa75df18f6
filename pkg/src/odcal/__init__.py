"""odcal: streaming origin-destination demand calibration from link counts."""

from .assignment import (
    AssignmentMatrix,
    NodVector,
    build_assignment,
    crossing_prob,
    logit_probs,
    seed_od,
)
from .bvls import BvlsResult, StackedSystem, kkt_max_violation
from .bvls import solve as bvls_solve
from .calibrator import (
    CalibConfig,
    FrameOutput,
    correct_counts,
    iter_frames,
    run_frame,
    run_sequence,
    select_best,
)
from .fixedpoint import FpConfig, clamp_map, steffensen_step
from .fixedpoint import run as fixed_point_run
from .mesosim import (
    FrameState,
    SimConfig,
    SimResult,
    expected_carryover_hits,
    save_state,
    simulate_frame,
)
from .metrics import ErrorRecord, covariance_report, nrmse, rel_error, rmse
from .network import (
    Link,
    Network,
    Node,
    SignalSpec,
    free_flow_times,
    generate_grid,
    load_network,
    save_network,
    validate,
)
from .routing import (
    Route,
    RouteCosts,
    RouteDb,
    add_best_new_route,
    init_shortest_paths,
    route_costs,
)
from .sampler import RouteFlow, VehiclePlan, route_flows, sample_plans

__version__ = "0.1.0"
