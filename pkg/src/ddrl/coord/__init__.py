"""Parameter store and actor/learner coordination topologies."""
from .store import ParameterStore, fetch, publish
from .topologies import (KINDS, SYNC_KINDS, AllreduceCoordinator, Applied, Dropped, GradientCoordinator, InferenceBatcher,
                         LagRecord, LagSummary, Pending, Queued, ThreadedInferenceBatcher,
                         TopologyConfig, TrajectoryCoordinator, allreduce_apply, allreduce_survivors,
                         central_inference, lag_stats, mean_update, submit_gradient, submit_trajectory)

__all__ = [
    "ParameterStore", "fetch", "publish", "KINDS", "SYNC_KINDS", "AllreduceCoordinator", "Applied", "Dropped", "Pending",
    "Queued", "GradientCoordinator", "TrajectoryCoordinator", "InferenceBatcher",
    "ThreadedInferenceBatcher", "LagRecord", "LagSummary", "TopologyConfig", "allreduce_apply",
    "allreduce_survivors", "central_inference", "lag_stats", "mean_update", "submit_gradient",
    "submit_trajectory",
]
