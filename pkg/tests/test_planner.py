"""Planner loop: wakeups, continuation decisions, budgets, delegation, replay."""

import shutil

import pytest

from skillet import DelegatedTask, EventKind, RunConfig, SessionStatus, SessionStore
from skillet.backends import ModelResponse, UsageRecord
from skillet.errors import ModelBackendError, StepBudgetExhausted
from skillet.planner import Runtime, WakeupQueue

from conftest import (
    REPAIR_DONE_WHEN,
    artifact_step,
    evidence_step,
    finish_step,
    make_runtime,
    patch_step,
    repair_script,
    submit_repair_task,
    verify_step,
)


def events_of(store, session_id):
    return [(e.kind, e.payload) for e in store.session(session_id).history]


def kinds_of(store, session_id):
    return [e.kind for e in store.session(session_id).history]


class TestWakeupQueue:
    def test_fifo_order(self):
        q = WakeupQueue()
        q.enqueue("s1", "initial")
        q.enqueue("s2", "initial")
        assert q.pop().session_id == "s1"
        assert q.pop().session_id == "s2"

    def test_per_session_mutual_exclusion(self):
        q = WakeupQueue()
        q.enqueue("s1", "initial")
        q.enqueue("s1", "followup")
        q.enqueue("s2", "initial")
        first = q.pop()
        assert first.session_id == "s1"
        second = q.pop()  # s1 is in flight, so s2 is handed out
        assert second.session_id == "s2"
        assert q.pop() is None
        q.done(first)
        assert q.pop().session_id == "s1"

    def test_enqueue_seq_is_monotone(self):
        q = WakeupQueue()
        a = q.enqueue("s1", "initial")
        b = q.enqueue("s2", "followup")
        assert b.enqueue_seq > a.enqueue_seq


class TestHappyPath:
    def test_tool_turn_appends_call_and_result(self, registry, repair_workspace, tmp_path):
        runtime = make_runtime(registry, repair_workspace, tmp_path / "store",
                               [evidence_step(log_path="in/fail.log")])
        submit_repair_task(runtime, repair_workspace)
        runtime.run_until_quiescent(5)  # script runs dry after the tool turn
        kinds = kinds_of(runtime.store, "s0001")
        assert kinds[:5] == [
            EventKind.USER_MESSAGE,
            EventKind.GUIDANCE_INJECTION,
            EventKind.ASSISTANT_MESSAGE,
            EventKind.TOOL_CALL,
            EventKind.TOOL_RESULT,
        ]

    def test_full_repair_run_completes(self, registry, repair_workspace, tmp_path):
        runtime = make_runtime(registry, repair_workspace, tmp_path / "store",
                               repair_script())
        submit_repair_task(runtime, repair_workspace)
        summary = runtime.run_until_quiescent(20)
        session = runtime.store.session("s0001")
        assert session.status is SessionStatus.COMPLETED
        assert (repair_workspace / "out" / "report.md").is_file()
        assert summary.by_id("s0001").turns == 5

    def test_single_decision_property(self, registry, repair_workspace, tmp_path):
        runtime = make_runtime(registry, repair_workspace, tmp_path / "store",
                               repair_script())
        submit_repair_task(runtime, repair_workspace)
        runtime.run_until_quiescent(20)
        results_between = 0
        for kind in kinds_of(runtime.store, "s0001"):
            if kind is EventKind.ASSISTANT_MESSAGE:
                results_between = 0
            elif kind is EventKind.TOOL_RESULT:
                results_between += 1
                assert results_between <= 1


class TestContinuationPaths:
    def test_plain_text_no_skills_completes(self, registry, guarded_workspace, tmp_path):
        runtime = make_runtime(registry, guarded_workspace, tmp_path / "store",
                               [{"respond": {"text": "nothing to do"}}])
        runtime.submit_task(DelegatedTask("say hi", "chat", guarded_workspace, ""))
        runtime.run_until_quiescent(5)
        session = runtime.store.session("s0001")
        assert session.status is SessionStatus.COMPLETED
        assert session.history[-1].payload["report_text"] == "nothing to do"

    def test_force_action_injects_and_reenters(self, registry, repair_workspace, tmp_path):
        script = [
            {"respond": {"text": "let me think"}},  # no tool call in reproduce
            evidence_step(log_path="in/fail.log"),
        ]
        runtime = make_runtime(registry, repair_workspace, tmp_path / "store", script)
        submit_repair_task(runtime, repair_workspace)
        with pytest.raises(StepBudgetExhausted):
            runtime.run_until_quiescent(2)
        events = events_of(runtime.store, "s0001")
        forced = [p for k, p in events
                  if k is EventKind.GUIDANCE_INJECTION and "must now call" in p.get("text", "")]
        assert forced and "repair_collect_evidence" in forced[0]["text"]
        # the forced re-entry executed the evidence tool
        assert any(k is EventKind.TOOL_RESULT and p["name"] == "repair_collect_evidence"
                   for k, p in events)

    def test_rejected_call_forces_another_turn(self, registry, repair_workspace, tmp_path):
        script = [
            patch_step(phase="reproduce"),  # patch is illegal in reproduce
            evidence_step(log_path="in/fail.log"),
        ]
        runtime = make_runtime(registry, repair_workspace, tmp_path / "store", script,
                               apply_tool_filters=False)  # let the bad call through to the guard
        submit_repair_task(runtime, repair_workspace)
        runtime.run_until_quiescent(6)
        events = events_of(runtime.store, "s0001")
        rejected = [p for k, p in events if k is EventKind.TOOL_RESULT and not p["ok"]]
        assert rejected
        assert rejected[0]["output"]["error"] == "rejected"
        assert "not available in phase reproduce" in rejected[0]["output"]["reason"]

    def test_blocked_finish_tool_result_carries_reasons(self, registry, repair_workspace,
                                                        tmp_path):
        script = [finish_step(report="premature")]
        runtime = make_runtime(registry, repair_workspace, tmp_path / "store", script)
        submit_repair_task(runtime, repair_workspace)
        with pytest.raises(StepBudgetExhausted):
            runtime.run_until_quiescent(1)
        events = events_of(runtime.store, "s0001")
        finish_results = [p for k, p in events
                          if k is EventKind.TOOL_RESULT and p["name"] == "finish"]
        assert finish_results[0]["ok"] is False
        assert "verification not passed" in finish_results[0]["output"]["reasons"]
        assert runtime.store.session("s0001").status is not SessionStatus.COMPLETED

    def test_blocked_plain_text_finish_injects_guidance(self, registry, repair_workspace,
                                                        tmp_path):
        # patch phase, no tool call, gates open -> schedule_followup path
        script = [
            evidence_step(log_path="in/fail.log"),
            {"when": {"phase_contains": "phase: patch"}, "respond": {"text": "done i think"}},
        ]
        runtime = make_runtime(registry, repair_workspace, tmp_path / "store", script)
        submit_repair_task(runtime, repair_workspace)
        runtime.run_until_quiescent(6)
        session = runtime.store.session("s0001")
        assert not session.has_completion()
        assert session.status is not SessionStatus.COMPLETED


class TestBackendFailures:
    class Flaky:
        provider = "flaky"
        response_model = "flaky-1"

        def __init__(self, failures, retryable=True):
            self.failures = failures
            self.retryable = retryable

        def complete(self, request):
            if self.failures > 0:
                self.failures -= 1
                raise ModelBackendError("transient", retryable=self.retryable)
            return ModelResponse(text="recovered",
                                 usage=UsageRecord(self.provider, self.response_model))

    def build(self, registry, ws, tmp_path, backend):
        from skillet import SessionStore as Store, UsageLog
        config = RunConfig.from_dict({"planner": {"backend_retries": 3}})
        store = Store(tmp_path / "store")
        return Runtime(registry, store, backend,
                       UsageLog(tmp_path / "store" / "requests.jsonl"), config)

    def test_retry_then_recover(self, registry, guarded_workspace, tmp_path):
        runtime = self.build(registry, guarded_workspace, tmp_path, self.Flaky(2))
        runtime.submit_task(DelegatedTask("t", "chat", guarded_workspace, ""))
        runtime.run_until_quiescent(10)
        session = runtime.store.session("s0001")
        assert session.status is SessionStatus.COMPLETED
        notes = [e for e in session.history if e.kind is EventKind.SYSTEM_NOTE]
        assert len(notes) == 2

    def test_retries_exhausted_fails_session(self, registry, guarded_workspace, tmp_path):
        runtime = self.build(registry, guarded_workspace, tmp_path, self.Flaky(99))
        runtime.submit_task(DelegatedTask("t", "chat", guarded_workspace, ""))
        runtime.run_until_quiescent(10)
        assert runtime.store.session("s0001").status is SessionStatus.FAILED

    def test_non_retryable_fails_immediately(self, registry, guarded_workspace, tmp_path):
        runtime = self.build(registry, guarded_workspace, tmp_path,
                             self.Flaky(99, retryable=False))
        runtime.submit_task(DelegatedTask("t", "chat", guarded_workspace, ""))
        runtime.run_until_quiescent(10)
        session = runtime.store.session("s0001")
        assert session.status is SessionStatus.FAILED
        assert len([e for e in session.history if e.kind is EventKind.SYSTEM_NOTE]) == 1


class TestBudget:
    def test_zero_budget_reports_untouched_sessions(self, registry, guarded_workspace,
                                                    tmp_path):
        runtime = make_runtime(registry, guarded_workspace, tmp_path / "store",
                               [{"respond": {"text": "hi"}}])
        runtime.submit_task(DelegatedTask("t", "chat", guarded_workspace, ""))
        with pytest.raises(StepBudgetExhausted) as exc:
            runtime.run_until_quiescent(0)
        summary = exc.value.summary
        assert summary.steps_used == 0
        assert summary.by_id("s0001").turns == 0
        assert runtime.store.session("s0001").status is SessionStatus.AWAITING_FOLLOWUP

    def test_never_verifying_script_exhausts_budget(self, registry, repair_workspace,
                                                    tmp_path):
        script = [evidence_step(log_path="in/fail.log")] + [
            {"when": {"phase_contains": "phase: patch"},
             "respond": {"text": "pondering"}} for _ in range(20)
        ]
        runtime = make_runtime(registry, repair_workspace, tmp_path / "store", script)
        submit_repair_task(runtime, repair_workspace)
        with pytest.raises(StepBudgetExhausted):
            runtime.run_until_quiescent(6)
        session = runtime.store.session("s0001")
        assert session.status is SessionStatus.AWAITING_FOLLOWUP
        assert not session.has_completion()

    def test_empty_queue_returns_normally(self, registry, guarded_workspace, tmp_path):
        runtime = make_runtime(registry, guarded_workspace, tmp_path / "store", [])
        summary = runtime.run_until_quiescent(5)
        assert summary.steps_used == 0


class TestDelegation:
    def delegation_script(self):
        return [
            {"when": {"tool_visible": "delegate_subtask"},
             "respond": {"tool_call": {"name": "delegate_subtask", "args": {
                 "task_text": "fix the failing repair bug test",
                 "task_type": "code_repair",
                 "subdir": ".",
                 "done_when": REPAIR_DONE_WHEN,
             }}}},
            *repair_script(),
            {"when": {"phase_contains": "child_report"},
             "respond": {"tool_call": {"name": "finish",
                                       "args": {"report_text": "child done, wrapping up"}}}},
        ]

    def test_parent_waits_then_receives_child_report(self, registry, repair_workspace,
                                                     tmp_path):
        runtime = make_runtime(registry, repair_workspace, tmp_path / "store",
                               self.delegation_script(), allowlist=("python3",))
        runtime.submit_task(DelegatedTask(
            "coordinate the work", "coordination", repair_workspace, "child reports back"))
        runtime.run_until_quiescent(25)
        store = runtime.store
        parent, child = store.session("s0001"), store.session("s0002")
        assert parent.status is SessionStatus.COMPLETED
        assert child.status is SessionStatus.COMPLETED
        assert child.parent_id == "s0001"
        assert child.routed_skills == ["repair"]
        reports = [e for e in parent.history
                   if e.kind is EventKind.USER_MESSAGE
                   and e.payload.get("source") == "child_report"]
        assert len(reports) == 1
        assert "verification passed" in reports[0].payload["text"]
        # the delegate result itself was the awaiting placeholder
        placeholder = next(e for e in parent.history
                           if e.kind is EventKind.TOOL_RESULT
                           and e.payload["name"] == "delegate_subtask")
        assert placeholder.payload["ok"] is True
        assert placeholder.payload["output"]["session_id"] == "s0002"

    def test_child_tool_surface_is_orchestration_plus_routed(self, registry,
                                                             repair_workspace, tmp_path):
        runtime = make_runtime(registry, repair_workspace, tmp_path / "store",
                               self.delegation_script(), allowlist=("python3",))
        runtime.submit_task(DelegatedTask(
            "coordinate", "coordination", repair_workspace, "child reports back"))
        runtime.run_until_quiescent(25)
        child = runtime.store.session("s0002")
        names = [t.name for t in runtime._candidate_tools(child)]
        assert names == [
            "fs_read", "fs_write", "run_command", "delegate_subtask", "finish",
            "repair_collect_evidence", "repair_apply_unified_patch",
            "repair_run_verification", "repair_write_artifact",
        ]
        parent_names = [t.name for t in runtime._candidate_tools(
            runtime.store.session("s0001"))]
        assert parent_names == ["fs_read", "fs_write", "run_command",
                                "delegate_subtask", "finish"]

    def test_empty_routed_set_still_spawns(self, registry, guarded_workspace, tmp_path):
        script = [
            {"respond": {"tool_call": {"name": "delegate_subtask", "args": {
                "task_text": "paint a fresco", "task_type": "art",
                "subdir": "studio", "done_when": ""}}}},
            {"respond": {"text": "blank canvas is fine"}},
            {"respond": {"tool_call": {"name": "finish", "args": {"report_text": "done"}}}},
        ]
        runtime = make_runtime(registry, guarded_workspace, tmp_path / "store", script)
        runtime.submit_task(DelegatedTask("delegate art", "other", guarded_workspace, ""))
        runtime.run_until_quiescent(10)
        child = runtime.store.session("s0002")
        assert child.routed_skills == []
        assert child.status is SessionStatus.COMPLETED
        assert (guarded_workspace / "studio").is_dir()

    def test_workspace_escape_via_delegate_is_tool_failure(self, registry,
                                                           guarded_workspace, tmp_path):
        script = [
            {"respond": {"tool_call": {"name": "delegate_subtask", "args": {
                "task_text": "t", "task_type": "x",
                "subdir": "../decoy", "done_when": ""}}}},
            {"respond": {"text": "ok giving up"}},
        ]
        runtime = make_runtime(registry, guarded_workspace, tmp_path / "store", script)
        runtime.submit_task(DelegatedTask("t", "other", guarded_workspace, ""))
        runtime.run_until_quiescent(10)
        events = events_of(runtime.store, "s0001")
        failed = next(p for k, p in events
                      if k is EventKind.TOOL_RESULT and p["name"] == "delegate_subtask")
        assert failed["ok"] is False
        assert failed["output"]["error"] == "path_escape"
        assert len(runtime.store.sessions()) == 1


class TestReplayDeterminism:
    def test_two_runs_byte_identical_logs(self, registry, tmp_path):
        from conftest import BUGGY_CALC, CALC_TEST
        ws = tmp_path / "ws"

        def reset_workspace():
            if ws.exists():
                shutil.rmtree(ws)
            (ws / "in").mkdir(parents=True)
            (ws / "in" / "calc.py").write_text(BUGGY_CALC)
            (ws / "in" / "test_calc.py").write_text(CALC_TEST)

        logs = []
        for run in ("one", "two"):
            reset_workspace()
            runtime = make_runtime(registry, ws, tmp_path / f"store-{run}", repair_script())
            submit_repair_task(runtime, ws)
            runtime.run_until_quiescent(20)
            log_dir = tmp_path / f"store-{run}" / "sessions"
            logs.append({p.name: p.read_bytes() for p in sorted(log_dir.glob("*.log"))})
        assert logs[0] == logs[1]


class TestHookFaultHandling:
    def test_fault_records_note_and_session_survives(self, tmp_path, guarded_workspace):
        import test_hooks
        from skillet import SkillRegistry

        test_hooks.BEHAVIOR.clear()
        calls = {"n": 0}

        def bomb_once(ctx):
            calls["n"] += 1
            if calls["n"] == 1:
                raise RuntimeError("flaky policy")
            return None

        test_hooks.BEHAVIOR["t.alpha_before_llm"] = bomb_once
        registry = SkillRegistry()
        registry.load_skill_package(test_hooks.synth_manifest(tmp_path, "alpha"))
        runtime = make_runtime(registry, guarded_workspace, tmp_path / "store",
                               [{"respond": {"text": "fine"}}])
        session = runtime.store.create_session(
            "t", "misc", guarded_workspace, "", routed_skills=["alpha"])
        runtime.queue.enqueue(session.session_id, "initial")
        runtime.run_until_quiescent(5)
        notes = [e for e in session.history if e.kind is EventKind.SYSTEM_NOTE]
        assert notes and notes[0].payload["note"] == "hook_fault"
        assert notes[0].payload["skill_id"] == "alpha"
        # the retried wakeup got past the hook and completed the session
        assert session.status is SessionStatus.COMPLETED
        test_hooks.BEHAVIOR.clear()


class TestSpawnSubsession:
    def test_precomputed_route_is_honored(self, registry, repair_workspace, tmp_path):
        from skillet import RoutedSkillSet
        runtime = make_runtime(registry, repair_workspace, tmp_path / "store", [])
        parent = runtime.submit_task(
            DelegatedTask("parent", "coordination", repair_workspace, ""))
        task = DelegatedTask("child", "unrelated_type", repair_workspace, "")
        child = runtime.spawn_subsession(
            parent, task, routed=RoutedSkillSet(entries=[("repair", 1.0)]))
        assert child.parent_id == parent.session_id
        assert child.routed_skills == ["repair"]
        assert runtime.queue.pending_sessions().count(child.session_id) == 1


class TestMultiWorker:
    def test_two_independent_sessions_complete(self, registry, tmp_path):
        ws_a = tmp_path / "a"
        ws_b = tmp_path / "b"
        ws_a.mkdir()
        ws_b.mkdir()
        script = [{"respond": {"text": "done"}}, {"respond": {"text": "done"}}]
        config = RunConfig.from_dict({"planner": {"single_worker": False}})
        runtime = make_runtime(registry, ws_a, tmp_path / "store", script, config=config)
        runtime.submit_task(DelegatedTask("a", "chat", ws_a, ""))
        runtime.submit_task(DelegatedTask("b", "chat", ws_b, ""))
        runtime.run_until_quiescent(10)
        statuses = {s.session_id: s.status for s in runtime.store.sessions()}
        assert set(statuses.values()) == {SessionStatus.COMPLETED}
