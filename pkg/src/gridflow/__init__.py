"""gridflow: a desk-scale grid workflow engine with late service binding,
dynamic allocation policies, fault-recovery chains and data cleanup."""

from .dyag import AllocationPolicy
from .engine import Engine, InstanceStatus, simulate
from .faults import FaultCause, FaultClass, FaultConfig, classify
from .gridsim import build_env, generate_montage, generate_pipeline
from .model import AbstractWorkflow, ActivityState, LifecycleEvent, topological_order, transition, validate

__all__ = [
    "AbstractWorkflow",
    "ActivityState",
    "AllocationPolicy",
    "Engine",
    "FaultCause",
    "FaultClass",
    "FaultConfig",
    "InstanceStatus",
    "LifecycleEvent",
    "build_env",
    "classify",
    "generate_montage",
    "generate_pipeline",
    "simulate",
    "topological_order",
    "transition",
    "validate",
]
