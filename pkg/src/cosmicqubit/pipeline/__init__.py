from .config import RunConfig
from .stages import STAGES, DependencyError, run_pipeline
from .sync import SyncMap, assign_pulses, build_sync

__all__ = ["RunConfig", "STAGES", "DependencyError", "run_pipeline", "SyncMap", "assign_pulses", "build_sync"]
