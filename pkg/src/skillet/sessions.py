"""Sessions, the typed history, skill-local state, and durable persistence.

Every session owns an append-only JSONL log at `<store>/sessions/<id>.log`.
Line 0 is a `session_meta` record; history events follow with gapless seqs
starting at 1; `skill_state_snapshot` records are interleaved at the seq of
the last event written, so reloading any prefix of the log reconstructs the
history up to that point and the last snapshot at or before it. Events are
fsynced before append_event returns; a torn tail line is truncated on load
with a warning, anything corrupt earlier raises CorruptStore.

`<store>/index.json` is a session directory (id, parent, status, roots,
usage); it is a convenience cache, the logs are authoritative.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import (
    CorruptStore,
    NotFound,
    OrphanToolResult,
    SessionClosed,
    UnknownParent,
    WorkspaceEscape,
)

log = logging.getLogger(__name__)


class EventKind(str, Enum):
    USER_MESSAGE = "user_message"
    ASSISTANT_MESSAGE = "assistant_message"
    TOOL_CALL = "tool_call"
    TOOL_RESULT = "tool_result"
    GUIDANCE_INJECTION = "guidance_injection"
    COMPLETION = "completion"
    SYSTEM_NOTE = "system_note"


class SessionStatus(str, Enum):
    ACTIVE = "active"
    AWAITING_FOLLOWUP = "awaiting_followup"
    COMPLETED = "completed"
    FAILED = "failed"


OPEN_STATUSES = (SessionStatus.ACTIVE, SessionStatus.AWAITING_FOLLOWUP)

# store-level record kinds that are not history events
_META_KIND = "session_meta"
_SNAPSHOT_KIND = "skill_state_snapshot"


@dataclass
class UsageTotals:
    input_tokens: int = 0
    output_tokens: int = 0
    cache_tokens: int = 0
    total_tokens: int = 0
    request_count: int = 0

    def add(self, input_tokens: int, output_tokens: int, cache_tokens: int, total_tokens: int) -> None:
        self.input_tokens += input_tokens
        self.output_tokens += output_tokens
        self.cache_tokens += cache_tokens
        self.total_tokens += total_tokens
        self.request_count += 1

    def as_dict(self) -> dict:
        return {
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "cache_tokens": self.cache_tokens,
            "total_tokens": self.total_tokens,
            "request_count": self.request_count,
        }


@dataclass
class HistoryEvent:
    seq: int
    kind: EventKind
    payload: dict


@dataclass
class Session:
    session_id: str
    workspace_root: Path
    task_text: str
    task_type: str
    done_when: str
    parent_id: str | None = None
    routed_skills: list[str] = field(default_factory=list)
    status: SessionStatus = SessionStatus.ACTIVE
    history: list[HistoryEvent] = field(default_factory=list)
    skill_state: dict[str, dict] = field(default_factory=dict)
    usage: UsageTotals = field(default_factory=UsageTotals)
    # (after_seq, skill_id, state) in write order; used by trace rendering
    state_snapshots: list[tuple[int, str, dict]] = field(default_factory=list)

    @property
    def next_seq(self) -> int:
        return self.history[-1].seq + 1 if self.history else 1

    def tool_call_ids(self) -> set[str]:
        return {
            e.payload.get("call_id")
            for e in self.history
            if e.kind is EventKind.TOOL_CALL
        }

    def has_completion(self) -> bool:
        return any(e.kind is EventKind.COMPLETION for e in self.history)

    def count(self, kind: EventKind) -> int:
        return sum(1 for e in self.history if e.kind is kind)


def _canonical(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def _contains(root: Path, candidate: Path) -> bool:
    try:
        candidate.relative_to(root)
    except ValueError:
        return False
    return True


class SessionStore:
    """Durable home of sessions. Per-session writes are serialized by a lock."""

    def __init__(self, store_dir: str | Path, fsync: bool = True):
        self.store_dir = Path(store_dir)
        self.sessions_dir = self.store_dir / "sessions"
        self.sessions_dir.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self._sessions: dict[str, Session] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._store_lock = threading.Lock()
        self._load()

    # -- public API --------------------------------------------------------

    def create_session(
        self,
        task_text: str,
        task_type: str,
        workspace_root: str | Path,
        done_when: str,
        parent_id: str | None = None,
        routed_skills: list[str] | None = None,
    ) -> Session:
        root = Path(workspace_root).resolve()
        if not root.is_dir():
            raise WorkspaceEscape(f"workspace root does not exist: {root}")
        if parent_id is not None:
            parent = self._sessions.get(parent_id)
            if parent is None:
                raise UnknownParent(f"unknown parent session {parent_id!r}")
            if not _contains(parent.workspace_root, root):
                raise WorkspaceEscape(
                    f"child root {root} escapes parent root {parent.workspace_root}"
                )
        with self._store_lock:
            session_id = f"s{len(self._sessions) + 1:04d}"
            session = Session(
                session_id=session_id,
                workspace_root=root,
                task_text=task_text,
                task_type=task_type,
                done_when=done_when,
                parent_id=parent_id,
                routed_skills=list(routed_skills or []),
            )
            self._sessions[session_id] = session
            self._locks[session_id] = threading.Lock()
        self._write_record(session, {
            "seq": 0,
            "kind": _META_KIND,
            "session_id": session_id,
            "parent_id": parent_id,
            "workspace_root": str(root),
            "task_text": task_text,
            "task_type": task_type,
            "done_when": done_when,
            "routed_skills": session.routed_skills,
        })
        self._flush_index()
        self.append_event(session_id, EventKind.USER_MESSAGE, {"text": task_text})
        return session

    def session(self, session_id: str) -> Session:
        try:
            return self._sessions[session_id]
        except KeyError:
            raise NotFound(f"unknown session {session_id!r}") from None

    def sessions(self) -> list[Session]:
        return sorted(self._sessions.values(), key=lambda s: s.session_id)

    def append_event(self, session_id: str, kind: EventKind | str, payload: dict) -> int:
        session = self.session(session_id)
        kind = EventKind(kind)
        with self._locks[session_id]:
            if session.status not in OPEN_STATUSES:
                raise SessionClosed(f"session {session_id} is {session.status.value}")
            if kind is EventKind.TOOL_RESULT:
                call_id = payload.get("call_id")
                if call_id not in session.tool_call_ids():
                    raise OrphanToolResult(f"no tool_call with call_id {call_id!r}")
            if kind is EventKind.COMPLETION and session.has_completion():
                raise SessionClosed(f"session {session_id} already has a completion event")
            seq = session.next_seq
            self._write_record(session, {"seq": seq, "kind": kind.value, "payload": payload})
            session.history.append(HistoryEvent(seq=seq, kind=kind, payload=payload))
            return seq

    def get_skill_state(self, session_id: str, skill_id: str) -> dict:
        session = self.session(session_id)
        return copy.deepcopy(session.skill_state.get(skill_id, {}))

    def put_skill_state(self, session_id: str, skill_id: str, state: dict) -> None:
        session = self.session(session_id)
        with self._locks[session_id]:
            if session.status not in OPEN_STATUSES:
                raise SessionClosed(f"session {session_id} is {session.status.value}")
            after_seq = session.history[-1].seq if session.history else 0
            self._write_record(session, {
                "seq": after_seq,
                "kind": _SNAPSHOT_KIND,
                "skill_id": skill_id,
                "state": state,
            })
            session.skill_state[skill_id] = copy.deepcopy(state)
            session.state_snapshots.append((after_seq, skill_id, copy.deepcopy(state)))

    def set_status(self, session_id: str, status: SessionStatus | str) -> None:
        session = self.session(session_id)
        session.status = SessionStatus(status)
        self._flush_index()

    def flush_index(self) -> None:
        self._flush_index()

    # -- persistence internals ----------------------------------------------

    def _log_path(self, session_id: str) -> Path:
        return self.sessions_dir / f"{session_id}.log"

    def _write_record(self, session: Session, record: dict) -> None:
        line = _canonical(record) + "\n"
        with open(self._log_path(session.session_id), "a", encoding="utf-8") as fh:
            fh.write(line)
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())

    def _flush_index(self) -> None:
        with self._store_lock:
            index = {
                sid: {
                    "parent_id": s.parent_id,
                    "status": s.status.value,
                    "workspace_root": str(s.workspace_root),
                    "usage": s.usage.as_dict(),
                }
                for sid, s in sorted(self._sessions.items())
            }
            tmp = self.store_dir / "index.json.tmp"
            tmp.write_text(json.dumps(index, sort_keys=True, indent=2) + "\n", encoding="utf-8")
            os.replace(tmp, self.store_dir / "index.json")

    def _load(self) -> None:
        index_path = self.store_dir / "index.json"
        index = {}
        if index_path.exists():
            index = json.loads(index_path.read_text(encoding="utf-8"))
        for log_path in sorted(self.sessions_dir.glob("*.log")):
            session = self._load_log(log_path)
            if session is None:
                continue
            meta = index.get(session.session_id, {})
            status = meta.get("status", SessionStatus.AWAITING_FOLLOWUP.value)
            session.status = SessionStatus(status)
            if session.has_completion():
                session.status = SessionStatus.COMPLETED
            usage = meta.get("usage")
            if usage:
                session.usage = UsageTotals(**usage)
            self._sessions[session.session_id] = session
            self._locks[session.session_id] = threading.Lock()

    def _load_log(self, log_path: Path) -> Session | None:
        raw = log_path.read_bytes()
        lines = raw.split(b"\n")
        # a well-formed log ends with a newline, so the final split chunk is empty;
        # anything else is a torn tail
        torn_tail = lines[-1] != b""
        body = lines[:-1]
        records: list[dict] = []
        for i, line in enumerate(body):
            try:
                records.append(json.loads(line.decode("utf-8")))
            except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                if i == len(body) - 1 and not torn_tail:
                    torn_tail = True
                    body = body[:-1]
                    break
                raise CorruptStore(f"{log_path.name}: corrupt record at line {i + 1}: {exc}") from exc
        if torn_tail:
            keep = b"\n".join(body) + (b"\n" if body else b"")
            log_path.write_bytes(keep)
            log.warning("%s: truncated torn tail record", log_path.name)
        if not records or records[0].get("kind") != _META_KIND:
            log.warning("%s: missing session_meta record, skipping", log_path.name)
            return None
        meta = records[0]
        session = Session(
            session_id=meta["session_id"],
            workspace_root=Path(meta["workspace_root"]),
            task_text=meta["task_text"],
            task_type=meta["task_type"],
            done_when=meta["done_when"],
            parent_id=meta.get("parent_id"),
            routed_skills=list(meta.get("routed_skills", [])),
        )
        for record in records[1:]:
            kind = record.get("kind")
            if kind == _SNAPSHOT_KIND:
                session.skill_state[record["skill_id"]] = record["state"]
                session.state_snapshots.append(
                    (record["seq"], record["skill_id"], record["state"])
                )
            else:
                session.history.append(HistoryEvent(
                    seq=record["seq"], kind=EventKind(kind), payload=record["payload"],
                ))
        return session
