from .backends import (Generation, HttpPolicyBackend, HttpToolBackend, PolicyBackend, ScriptedPolicy,
                       ScriptedTool, ToolBackend, ToolResult, ToolTimeout, TransportError, fingerprint)
from .tools import ArtifactStore, ToolError, ToolRouter, crop_regions, crop_tool
from .workflow import (InvalidTransition, Query, RolloutConfig, ToolLogEntry, Trajectory, WorkflowState,
                       derive_seed, run_group, run_rollout)
