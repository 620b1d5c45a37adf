"""skillet: an event-driven agent runtime with enforceable skill plugins.

Skills ship as packaged plugins (JSON manifest + config) carrying tool
schemas, deterministic executors, a four-stage hook pipeline, skill-local
state, routing metadata, and completion gates. A deterministic scripted
model backend makes the whole control machinery testable without a live
model.
"""

from __future__ import annotations

from pathlib import Path

from .backends import HttpBackend, ModelRequest, ModelResponse, ScriptedBackend, UsageLog
from .config import PlannerConfig, RunConfig, WorkspaceConfig
from .hooks import HookContext, HookDecision, HookPipeline
from .planner import Runtime, RunSummary, WakeupQueue
from .registry import PolicyConfig, SkillManifest, SkillRegistry
from .router import DelegatedTask, RouterConfig, RoutedSkillSet, route, score_candidate
from .schema import ActionSchema, validate_action_args
from .sessions import EventKind, HistoryEvent, Session, SessionStatus, SessionStore

# importing these modules registers the built-in executors, hook programs,
# and completion gates in the binding tables
from . import repair as repair  # noqa: F401
from . import workspace as workspace  # noqa: F401

__version__ = "0.1.0"


def builtin_skills_dir() -> Path:
    """Directory holding the skill packages that ship with the runtime."""
    return Path(__file__).parent / "skills"


__all__ = [
    "ActionSchema",
    "DelegatedTask",
    "EventKind",
    "HistoryEvent",
    "HookContext",
    "HookDecision",
    "HookPipeline",
    "HttpBackend",
    "ModelRequest",
    "ModelResponse",
    "PlannerConfig",
    "PolicyConfig",
    "RouterConfig",
    "RoutedSkillSet",
    "RunConfig",
    "RunSummary",
    "Runtime",
    "ScriptedBackend",
    "Session",
    "SessionStatus",
    "SessionStore",
    "SkillManifest",
    "SkillRegistry",
    "UsageLog",
    "WakeupQueue",
    "WorkspaceConfig",
    "builtin_skills_dir",
    "route",
    "score_candidate",
    "validate_action_args",
]
