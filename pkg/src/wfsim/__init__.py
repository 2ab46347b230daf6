"""Desk-scale serverless workflow engine with dataflow and controlflow invocation."""
from .engine import BandwidthSetting, ConfigError, Engine, EngineConfig, ExecutionHandle, ExecutionTimeout, run_once
from .partition import NodePlan, Placement, compute_node_plans, partition, repartition_and_restart
from .workflow import (
    DagView,
    FunctionDef,
    WorkflowSpec,
    build_dag_view,
    load_workflow,
    parse_workflow,
    synthesize_workflow,
)

__version__ = "0.1.0"

__all__ = [
    "BandwidthSetting", "ConfigError", "DagView", "Engine", "EngineConfig", "ExecutionHandle",
    "ExecutionTimeout", "FunctionDef", "NodePlan", "Placement", "WorkflowSpec", "build_dag_view",
    "compute_node_plans", "load_workflow", "parse_workflow", "partition", "repartition_and_restart",
    "run_once", "synthesize_workflow",
]
