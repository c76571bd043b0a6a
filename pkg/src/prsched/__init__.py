"""Preemptive priority scheduling on a simulated partially reconfigurable FPGA."""

from .fabric import Fabric, TimingModel
from .kernels import Context, KernelInstance, apply_filter, register_kernel
from .metrics import RunStats, TraceEvent, overhead, service_times, throughput
from .scheduler import PriorityQueues, Scheduler, SchedulerConfig, SimulationResult, simulate
from .simcore import Engine
from .workload import STUDY_SEEDS, SCENARIOS, Task, WorkloadSpec, generate_workload

__all__ = [
    "Context", "Engine", "Fabric", "KernelInstance", "STUDY_SEEDS", "PriorityQueues",
    "RunStats", "SCENARIOS", "Scheduler", "SchedulerConfig", "SimulationResult", "Task",
    "TimingModel", "TraceEvent", "WorkloadSpec", "apply_filter", "generate_workload",
    "overhead", "register_kernel", "service_times", "simulate", "throughput",
]
