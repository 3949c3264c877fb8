"""Online conformance checking for simulated manufacturing processes."""

from .config import CheckerConfig, load_config
from .conformance import (
    ConformanceChecker, Deviation, DeviationKind, RootCause, check_order, check_series, trace_cost,
)
from .dtw import dtw_distance
from .engine import (
    ChangeModel, Delay, DropEvent, FaultPlan, InapplicableFault, Notification, NotificationKind, SimClock,
    SwapOrder, TamperSeries, ZeroDuration, run_instance, simulate_runs,
)
from .events import Event, Log, Logger, ModelRecord, Trace, load_log, replay, save_log
from .model import (
    Loop, ModelError, ModelSyntaxError, Parallel, ProcessModel, Sequence, Signal, SubprocessCall, Task,
    allowed_next, parse_model, parse_repository, serialize_model,
)
from .series import SensorSeries, golden_series
from .splitter import PartSplitter, split
from .stats import RunningStats, welford_update, zscore
from .xes import export_xes, import_xes, validate_xes

__version__ = "0.1.0"

__all__ = [
    "ChangeModel", "CheckerConfig", "ConformanceChecker", "Delay", "Deviation", "DeviationKind", "DropEvent",
    "Event", "FaultPlan", "InapplicableFault", "Log", "Logger", "Loop", "ModelError", "ModelRecord",
    "ModelSyntaxError", "Notification", "NotificationKind", "Parallel", "PartSplitter", "ProcessModel",
    "RootCause", "RunningStats", "SensorSeries", "Sequence", "Signal", "SimClock", "SubprocessCall",
    "SwapOrder", "TamperSeries", "Task", "Trace", "ZeroDuration", "allowed_next", "check_order",
    "check_series", "dtw_distance", "export_xes", "golden_series", "import_xes", "load_config", "load_log",
    "parse_model", "parse_repository", "replay", "run_instance", "save_log", "serialize_model",
    "simulate_runs", "split", "trace_cost", "validate_xes", "welford_update", "zscore",
]
