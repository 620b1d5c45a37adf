"""The event-driven single-step planner loop.

One wakeup = at most one model decision plus its tool effects, all persisted
before the wakeup returns, with a follow-up enqueued while anything remains
open. The queue is FIFO by enqueue order and never hands out two wakeups for
the same session at once; single-worker mode drains it deterministically.
"""

from __future__ import annotations

import json
import logging
import threading
from collections import defaultdict, deque
from dataclasses import dataclass, field
from functools import partial

from . import bindings
from .backends import ModelRequest, ModelResponse
from .config import RunConfig
from .errors import (
    CompletionBlocked,
    HookFault,
    ModelBackendError,
    NotFound,
    SkilletError,
    StepBudgetExhausted,
    ToolError,
)
from .execution import ExecutionContext, RuntimeServices
from .hooks import ContinuationKind, HookPipeline
from .registry import SkillRegistry
from .router import DelegatedTask, RoutedSkillSet, route
from .schema import ActionSchema, validate_action_args
from .sessions import (
    EventKind,
    OPEN_STATUSES,
    Session,
    SessionStatus,
    SessionStore,
    UsageTotals,
)
from .workspace import orchestration_schemas, resolve

log = logging.getLogger(__name__)


@dataclass
class WakeupEvent:
    session_id: str
    cause: str  # initial | followup | forced_action | child_report
    enqueue_seq: int
    attempt: int = 0


class WakeupQueue:
    """FIFO queue with per-session mutual exclusion enforced at pop time."""

    def __init__(self):
        self._items: deque[WakeupEvent] = deque()
        self._in_flight: set[str] = set()
        self._seq = 0
        self._lock = threading.Lock()

    def enqueue(self, session_id: str, cause: str, attempt: int = 0) -> WakeupEvent:
        with self._lock:
            self._seq += 1
            event = WakeupEvent(session_id=session_id, cause=cause,
                                enqueue_seq=self._seq, attempt=attempt)
            self._items.append(event)
            return event

    def pop(self) -> WakeupEvent | None:
        with self._lock:
            for i, event in enumerate(self._items):
                if event.session_id not in self._in_flight:
                    del self._items[i]
                    self._in_flight.add(event.session_id)
                    return event
            return None

    def done(self, event: WakeupEvent) -> None:
        with self._lock:
            self._in_flight.discard(event.session_id)

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)

    def in_flight_count(self) -> int:
        with self._lock:
            return len(self._in_flight)

    def pending_sessions(self) -> list[str]:
        with self._lock:
            return [e.session_id for e in self._items]


@dataclass
class TurnRecord:
    session_id: str
    cause: str
    skipped: bool = False
    model_called: bool = False
    decision: str | None = None
    tool_name: str | None = None
    tool_ok: bool | None = None
    followup: bool = False


@dataclass
class SessionSummary:
    session_id: str
    parent_id: str | None
    status: str
    turns: int
    usage: UsageTotals


@dataclass
class RunSummary:
    sessions: list[SessionSummary] = field(default_factory=list)
    steps_used: int = 0
    pending: int = 0

    def by_id(self, session_id: str) -> SessionSummary:
        return next(s for s in self.sessions if s.session_id == session_id)


class Runtime:
    """Wires registry, store, backend, usage log, and config into the loop."""

    def __init__(self, registry: SkillRegistry, store: SessionStore, backend,
                 usage_log, config: RunConfig | None = None):
        self.registry = registry
        self.store = store
        self.backend = backend
        self.usage_log = usage_log
        self.config = config or RunConfig()
        self.pipeline = HookPipeline(
            registry, store, apply_tool_filters=self.config.planner.apply_tool_filters
        )
        self.queue = WakeupQueue()
        self.orchestration = orchestration_schemas()
        self._turns: dict[str, int] = defaultdict(int)
        self._pending_completion: dict[str, str] = {}

    # -- session intake -----------------------------------------------------

    def submit_task(self, task: DelegatedTask, parent_id: str | None = None,
                    routed: RoutedSkillSet | None = None) -> Session:
        if routed is None:
            routed = route(self.registry, task, self.config.router)
        session = self.store.create_session(
            task_text=task.task_text,
            task_type=task.task_type,
            workspace_root=task.workspace_root,
            done_when=task.done_when,
            parent_id=parent_id,
            routed_skills=routed.skill_ids(),
        )
        self.queue.enqueue(session.session_id, "initial")
        return session

    def spawn_subsession(self, parent: Session, task: DelegatedTask,
                         routed: RoutedSkillSet | None = None) -> Session:
        """Create a routed child session and enqueue its first wakeup. The
        parent's placeholder tool_result is recorded by the normal tool flow."""
        return self.submit_task(task, parent_id=parent.session_id, routed=routed)

    # -- runtime services exposed to tools -----------------------------------

    def _delegate(self, parent: Session, task_text: str, task_type: str,
                  subdir: str, done_when: str) -> dict:
        scoped = resolve(parent.workspace_root, subdir or ".")
        scoped.resolved.mkdir(parents=True, exist_ok=True)
        task = DelegatedTask(task_text=task_text, task_type=task_type,
                             workspace_root=scoped.resolved, done_when=done_when)
        child = self.spawn_subsession(parent, task)
        return {
            "session_id": child.session_id,
            "routed_skills": child.routed_skills,
            "status": "delegated",
            "note": "the child's report will arrive as a follow-up message",
        }

    def _finish(self, session: Session, report_text: str) -> dict:
        reasons = [r for _, r in self._gate_reasons(session)]
        if reasons:
            raise CompletionBlocked(reasons)
        # completion event is appended after this call's tool_result lands
        self._pending_completion[session.session_id] = report_text
        return {"completed": True, "report_text": report_text}

    def _gate_reasons(self, session: Session) -> list[tuple[str, str]]:
        pairs: list[tuple[str, str]] = []
        for skill_id in session.routed_skills:
            gate = bindings.COMPLETION_GATES.get(skill_id)
            if gate is None or skill_id not in self.registry:
                continue
            manifest = self.registry.lookup(skill_id)
            state = self.store.get_skill_state(session.session_id, skill_id)
            pairs.extend((skill_id, reason) for reason in gate(session, state, manifest))
        return pairs

    def complete_session(self, session: Session, report_text: str = "") -> list[str]:
        """Complete if every routed skill's gate is satisfied; otherwise
        return the open reasons and leave the session running."""
        reasons = [r for _, r in self._gate_reasons(session)]
        if reasons:
            return reasons
        self._complete(session, report_text)
        return []

    def _complete(self, session: Session, report_text: str) -> None:
        self.store.append_event(session.session_id, EventKind.COMPLETION,
                                {"report_text": report_text})
        self.store.set_status(session.session_id, SessionStatus.COMPLETED)
        if session.parent_id is not None:
            try:
                self.store.append_event(session.parent_id, EventKind.USER_MESSAGE, {
                    "text": f"[child_report {session.session_id}] {report_text}",
                    "source": "child_report",
                    "child_session_id": session.session_id,
                })
            except SkilletError as exc:
                log.warning("parent %s unreachable for child report: %s",
                            session.parent_id, exc)
                return
            self.queue.enqueue(session.parent_id, "child_report")

    # -- the single-step wakeup ----------------------------------------------

    def _candidate_tools(self, session: Session) -> list[ActionSchema]:
        tools = list(self.orchestration)
        for skill_id in session.routed_skills:
            if skill_id in self.registry:
                tools.extend(self.registry.lookup(skill_id).tools)
        return tools

    def run_wakeup(self, event: WakeupEvent) -> TurnRecord:
        session = self.store.session(event.session_id)
        record = TurnRecord(session_id=event.session_id, cause=event.cause)
        if session.status not in OPEN_STATUSES:
            record.skipped = True
            return record
        self.store.set_status(session.session_id, SessionStatus.ACTIVE)
        self._turns[session.session_id] += 1

        def enqueue_followup(cause: str = "followup", attempt: int = 0) -> None:
            self.queue.enqueue(session.session_id, cause, attempt=attempt)
            record.followup = True

        try:
            outcome = self.pipeline.run_before_llm(session, self._candidate_tools(session))
            for skill_id, text in outcome.injections:
                self.store.append_event(session.session_id, EventKind.GUIDANCE_INJECTION,
                                        {"skill_id": skill_id, "text": text})
        except HookFault as fault:
            self._note_hook_fault(session, fault)
            enqueue_followup()
            return self._finalize(session, record)

        request = ModelRequest(
            messages=render_messages(session),
            tools=outcome.visible_tools,
            session_id=session.session_id,
        )
        try:
            response = self.backend.complete(request)
        except ModelBackendError as err:
            self.store.append_event(session.session_id, EventKind.SYSTEM_NOTE, {
                "note": "model_backend_error",
                "detail": str(err),
                "retryable": err.retryable,
                "attempt": event.attempt,
            })
            if err.retryable and event.attempt + 1 < self.config.planner.backend_retries:
                enqueue_followup(cause=event.cause, attempt=event.attempt + 1)
            else:
                self.store.set_status(session.session_id, SessionStatus.FAILED)
            return self._finalize(session, record)

        record.model_called = True
        self.usage_log.record(session, request, response)
        self.store.append_event(session.session_id, EventKind.ASSISTANT_MESSAGE, {
            "text": response.text,
            "tool_call": (
                {"name": response.tool_call.name, "args": response.tool_call.args}
                if response.tool_call else None
            ),
        })

        try:
            decision = self.pipeline.run_after_llm(session, response)
            record.decision = decision.kind.value
            if decision.kind is ContinuationKind.PROCEED_TO_TOOL:
                self._run_tool(session, response, outcome.visible_tools, record,
                               enqueue_followup)
            elif decision.kind is ContinuationKind.FORCE_ACTION:
                self.store.append_event(session.session_id, EventKind.GUIDANCE_INJECTION, {
                    "skill_id": decision.skill_id or "runtime",
                    "text": f"You must now call `{decision.tool_name}`.",
                })
                enqueue_followup(cause="forced_action")
            elif decision.kind is ContinuationKind.SCHEDULE_FOLLOWUP:
                enqueue_followup()
            else:  # allow_finish
                gate_pairs = self._gate_reasons(session)
                if gate_pairs:
                    self.store.append_event(session.session_id, EventKind.GUIDANCE_INJECTION, {
                        "skill_id": gate_pairs[0][0],
                        "text": "Completion is blocked: "
                                + "; ".join(r for _, r in gate_pairs),
                    })
                    enqueue_followup()
                else:
                    self._complete(session, report_text=response.text)
        except HookFault as fault:
            self._note_hook_fault(session, fault)
            enqueue_followup()
        return self._finalize(session, record)

    def _run_tool(self, session: Session, response: ModelResponse,
                  visible: list[ActionSchema], record: TurnRecord,
                  enqueue_followup) -> None:
        call = response.tool_call
        assert call is not None
        record.tool_name = call.name
        call_id = f"call-{session.count(EventKind.TOOL_CALL) + 1}"
        schema = next((t for t in visible if t.name == call.name), None)

        def refuse(output: dict) -> None:
            self.store.append_event(session.session_id, EventKind.TOOL_CALL, {
                "name": call.name, "args": call.args, "call_id": call_id,
                "accepted": False,
            })
            self.store.append_event(session.session_id, EventKind.TOOL_RESULT, {
                "call_id": call_id, "name": call.name, "ok": False, "output": output,
            })
            record.tool_ok = False
            enqueue_followup()

        if schema is None:
            refuse({"error": "unknown_tool",
                    "message": f"tool {call.name!r} is not available"})
            return
        validation = validate_action_args(schema, call.args)
        if not validation.ok:
            refuse({"error": "invalid_arguments",
                    "issues": [{"path": i.path, "reason": i.reason}
                               for i in validation.errors]})
            return
        pre = self.pipeline.run_before_tool(session, {
            "name": call.name, "args": validation.value, "call_id": call_id,
        })
        if not pre.allowed:
            refuse({"error": "rejected", "reason": pre.reason,
                    "redirect_hint": pre.redirect_hint,
                    "rejected_by": pre.rejecting_skill})
            return

        self.store.append_event(session.session_id, EventKind.TOOL_CALL, {
            "name": call.name, "args": pre.args, "call_id": call_id, "accepted": True,
        })
        ok, output = self._execute(schema, pre.args, session, call_id)
        record.tool_ok = ok
        seq = self.store.append_event(session.session_id, EventKind.TOOL_RESULT, {
            "call_id": call_id, "name": call.name, "ok": ok, "output": output,
        })
        report_text = self._pending_completion.pop(session.session_id, None)
        if ok and report_text is not None:
            # a successful finish: gates were checked inside the executor
            self._complete(session, report_text)
            return
        after = self.pipeline.run_after_tool(session, {
            "name": call.name, "ok": ok, "args": pre.args, "result": output, "seq": seq,
        })
        # a successful delegation parks the parent until the child reports;
        # every other executed tool needs a turn for the model to see its result
        paused = ok and schema.executor_id == "core.delegate_subtask"
        if after.followup_needed or not paused:
            enqueue_followup()

    def _execute(self, schema: ActionSchema, args: dict, session: Session,
                 call_id: str) -> tuple[bool, dict]:
        allowlist = list(self.config.workspace.command_allowlist)
        try:
            skill = self.registry.lookup(schema.name)
        except NotFound:
            skill = None  # orchestration tool
        else:
            allowlist.extend(a for a in skill.policy.command_allowlist if a not in allowlist)
        ctx = ExecutionContext(
            session=session,
            store=self.store,
            registry=self.registry,
            workspace_root=session.workspace_root,
            command_allowlist=allowlist,
            command_timeout_s=self.config.workspace.command_timeout_s,
            output_truncate_bytes=self.config.workspace.output_truncate_bytes,
            services=RuntimeServices(
                delegate=partial(self._delegate, session),
                finish=partial(self._finish, session),
            ),
            skill=skill,
            call_id=call_id,
        )
        executor = self.registry.executors[schema.executor_id]
        try:
            return True, executor(args, ctx)
        except ToolError as exc:
            return False, exc.payload()
        except SkilletError as exc:
            return False, {"error": type(exc).__name__, "message": str(exc)}
        except Exception as exc:  # executor bug: surface it, keep the loop alive
            log.exception("executor %s crashed", schema.executor_id)
            return False, {"error": "executor_fault", "message": repr(exc)}

    def _note_hook_fault(self, session: Session, fault: HookFault) -> None:
        self.store.append_event(session.session_id, EventKind.SYSTEM_NOTE, {
            "note": "hook_fault",
            "skill_id": fault.skill_id,
            "program_id": fault.program_id,
            "detail": str(fault),
        })

    def _finalize(self, session: Session, record: TurnRecord) -> TurnRecord:
        if session.status in OPEN_STATUSES:
            self.store.set_status(
                session.session_id,
                SessionStatus.ACTIVE if record.followup else SessionStatus.AWAITING_FOLLOWUP,
            )
        return record

    # -- draining --------------------------------------------------------------

    def run_until_quiescent(self, max_steps: int | None = None) -> RunSummary:
        limit = self.config.planner.max_steps if max_steps is None else max_steps
        if self.config.planner.single_worker:
            steps = self._drain_single(limit)
        else:
            steps = self._drain_threads(limit)
        summary = self.summary(steps)
        self.store.flush_index()
        return summary

    def _drain_single(self, limit: int) -> int:
        steps = 0
        while len(self.queue):
            if steps >= limit:
                self._park_pending()
                raise StepBudgetExhausted(self.summary(steps))
            event = self.queue.pop()
            assert event is not None
            try:
                self.run_wakeup(event)
            finally:
                self.queue.done(event)
            steps += 1
        return steps

    def _drain_threads(self, limit: int, workers: int = 4) -> int:
        lock = threading.Lock()
        state = {"steps": 0, "exhausted": False}

        def worker() -> None:
            while True:
                with lock:
                    if state["exhausted"]:
                        return
                    if state["steps"] >= limit:
                        if len(self.queue):
                            state["exhausted"] = True
                        return
                    event = self.queue.pop()
                    if event is not None:
                        state["steps"] += 1
                if event is None:
                    if not len(self.queue) and not self.queue.in_flight_count():
                        return
                    threading.Event().wait(0.005)
                    continue
                try:
                    self.run_wakeup(event)
                finally:
                    self.queue.done(event)

        threads = [threading.Thread(target=worker, daemon=True) for _ in range(workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if state["exhausted"] or (state["steps"] >= limit and len(self.queue)):
            self._park_pending()
            raise StepBudgetExhausted(self.summary(state["steps"]))
        return state["steps"]

    def _park_pending(self) -> None:
        for session_id in self.queue.pending_sessions():
            if self.store.session(session_id).status is SessionStatus.ACTIVE:
                self.store.set_status(session_id, SessionStatus.AWAITING_FOLLOWUP)

    def summary(self, steps_used: int = 0) -> RunSummary:
        return RunSummary(
            sessions=[
                SessionSummary(
                    session_id=s.session_id,
                    parent_id=s.parent_id,
                    status=s.status.value,
                    turns=self._turns.get(s.session_id, 0),
                    usage=s.usage,
                )
                for s in self.store.sessions()
            ],
            steps_used=steps_used,
            pending=len(self.queue),
        )


def render_messages(session: Session) -> list[tuple[str, str]]:
    """Render the typed history to (role, text) chat messages.

    Guidance injections become user messages at their seq positions; tool
    results come back as user-role text so the rendering stays provider
    generic; tool_call events are folded into the assistant line.
    """
    messages: list[tuple[str, str]] = []
    for event in session.history:
        payload = event.payload
        if event.kind in (EventKind.USER_MESSAGE, EventKind.GUIDANCE_INJECTION):
            messages.append(("user", payload["text"]))
        elif event.kind is EventKind.ASSISTANT_MESSAGE:
            text = payload.get("text") or ""
            call = payload.get("tool_call")
            if call:
                text += f"\n[tool_call] {call['name']}({json.dumps(call['args'], sort_keys=True)})"
            messages.append(("assistant", text.strip()))
        elif event.kind is EventKind.TOOL_RESULT:
            messages.append(("user", (
                f"[tool_result {payload['name']}] ok={str(payload['ok']).lower()} "
                f"{json.dumps(payload['output'], sort_keys=True)}"
            )))
        # tool_call, system_note, completion are runtime bookkeeping
    return messages
