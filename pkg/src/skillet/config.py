"""Runtime configuration knobs, overridable from a JSON config file."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .router import RouterConfig


@dataclass(frozen=True)
class PlannerConfig:
    max_steps: int = 100
    backend_retries: int = 3
    single_worker: bool = True
    # ablation switch: when False, hook tool filters are computed but not applied
    apply_tool_filters: bool = True


@dataclass(frozen=True)
class WorkspaceConfig:
    command_allowlist: tuple[str, ...] = ()
    command_timeout_s: float = 60.0
    output_truncate_bytes: int = 32768


@dataclass(frozen=True)
class RunConfig:
    router: RouterConfig = field(default_factory=RouterConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    workspace: WorkspaceConfig = field(default_factory=WorkspaceConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        return cls().merged(raw)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def merged(self, raw: dict) -> "RunConfig":
        out = self
        for section, factory in (("router", RouterConfig),
                                 ("planner", PlannerConfig),
                                 ("workspace", WorkspaceConfig)):
            overrides = raw.get(section)
            if not overrides:
                continue
            known = {f.name for f in fields(factory)}
            unknown = set(overrides) - known
            if unknown:
                raise ValueError(f"unknown {section} config keys: {sorted(unknown)}")
            if section == "workspace" and "command_allowlist" in overrides:
                overrides = dict(overrides)
                overrides["command_allowlist"] = tuple(overrides["command_allowlist"])
            out = replace(out, **{section: replace(getattr(out, section), **overrides)})
        return out
