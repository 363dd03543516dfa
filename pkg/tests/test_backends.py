"""Backend oracles: greedy geometry rules, retry policy, record/replay closure."""

import json

import numpy as np
import pytest

from conftest import goal_at_current, goal_moved, make_oracle, make_tabletop_scene
from poseloop.backends import (
    AgentRequest,
    AgentRole,
    HttpBackend,
    OracleConfig,
    RecordBackend,
    ReplayBackend,
    request_key,
)
from poseloop.errors import BackendUnavailable, ProtocolViolation, ReplayMiss
from poseloop.geometry import RigidPose, axis_length, single_axis_rotation


def evaluator_request(task="t", iteration=1):
    return AgentRequest(role=AgentRole.EVALUATOR, prompt="judge",
                        metadata={"task": task, "iteration": iteration})


def proposer_request(task="t", iteration=1, mode="single_axis"):
    return AgentRequest(role=AgentRole.PROPOSER, prompt="propose",
                        metadata={"task": task, "iteration": iteration, "mode": mode})


class TestOracleEvaluator:
    def test_faithful_at_goal(self, tabletop_scene):
        oracle = make_oracle(tabletop_scene, goal_at_current(tabletop_scene))
        oracle.bind_state(tabletop_scene)
        verdict = json.loads(oracle.complete(evaluator_request()))
        assert verdict["faithful"] is True
        assert verdict["best_view"] == 1

    def test_unfaithful_when_displaced(self, tabletop_scene):
        goal = goal_moved(tabletop_scene, delta=(0.3, 0, 0))
        oracle = make_oracle(tabletop_scene, goal)
        oracle.bind_state(tabletop_scene)
        verdict = json.loads(oracle.complete(evaluator_request()))
        assert verdict["faithful"] is False

    def test_unfaithful_when_rotated(self, tabletop_scene):
        goal = goal_moved(tabletop_scene, axis="z", angle_deg=90.0)
        oracle = make_oracle(tabletop_scene, goal)
        oracle.bind_state(tabletop_scene)
        assert json.loads(oracle.complete(evaluator_request()))["faithful"] is False

    def test_interpenetration_blocks_faithful(self):
        # Move the can inside the crate's AABB, goal at current pose.
        from poseloop.meshes import box_mesh, cylinder_mesh
        from poseloop.scene import SceneObject, SceneState, assign_roles

        bv, bf = box_mesh((0.1, 0.1, 0.1), center=(0.0, 0.0, 0.05))
        cv, cf = cylinder_mesh(0.03, 0.08, center=(0.0, 0.0, 0.05))
        scene = assign_roles(
            SceneState(objects=(
                SceneObject("crate", "crate", bv, bf),
                SceneObject("can", "can", cv, cf),
            )),
            "crate", ["can"],
        )
        oracle = make_oracle(scene, goal_at_current(scene))
        oracle.bind_state(scene)
        verdict = json.loads(oracle.complete(evaluator_request()))
        assert verdict["faithful"] is False
        assert "interpenetrat" in verdict["rationale"]

    def test_best_view_argmax_mask_pixels(self, tabletop_scene):
        from poseloop.camera import frame_aabb
        from poseloop.loop import LoopConfig
        from poseloop.render import render

        config = LoopConfig(image_width=128, image_height=96)
        rig = frame_aabb(tabletop_scene.focus_aabb(), config.intrinsics(), k=4)
        renders = [render(tabletop_scene, cam) for cam in rig.cameras]
        goal = goal_moved(tabletop_scene, delta=(0.5, 0, 0))
        oracle = make_oracle(tabletop_scene, goal)
        oracle.bind_state(tabletop_scene, rig, renders)
        verdict = json.loads(oracle.complete(evaluator_request()))
        counts = [out.mask_pixel_count("crate") for out in renders]
        assert verdict["best_view"] == int(np.argmax(counts)) + 1


class TestOracleProposer:
    def test_pure_rotation_goal(self, tabletop_scene):
        goal = goal_moved(tabletop_scene, axis="z", angle_deg=90.0)
        oracle = make_oracle(tabletop_scene, goal)
        oracle.bind_state(tabletop_scene)
        proposal = json.loads(oracle.complete(proposer_request()))
        assert proposal["rotation_axis"] == "z"
        assert proposal["rotation_angle_deg"] == pytest.approx(90.0)
        assert np.abs(proposal["translation"]).max() < 1e-9

    def test_pure_translation_goal(self, tabletop_scene):
        unit = axis_length(
            np.ptp(tabletop_scene.target_canonical_vertices, axis=0)
        )
        goal = goal_moved(tabletop_scene, delta=(0.5 * unit, 0, 0))
        oracle = make_oracle(tabletop_scene, goal)
        oracle.bind_state(tabletop_scene)
        proposal = json.loads(oracle.complete(proposer_request()))
        assert proposal["rotation_angle_deg"] == 0.0
        assert np.allclose(proposal["translation"], [0.5, 0, 0], atol=1e-9)

    def test_translation_clamped(self, tabletop_scene):
        goal = goal_moved(tabletop_scene, delta=(10.0, 0, 0))
        oracle = make_oracle(tabletop_scene, goal)
        oracle.bind_state(tabletop_scene)
        proposal = json.loads(oracle.complete(proposer_request()))
        assert proposal["translation"][0] == pytest.approx(3.0)

    def test_angle_snaps_to_15_degrees(self, tabletop_scene):
        goal = goal_moved(tabletop_scene, axis="y", angle_deg=52.0)
        oracle = make_oracle(tabletop_scene, goal)
        oracle.bind_state(tabletop_scene)
        proposal = json.loads(oracle.complete(proposer_request()))
        assert proposal["rotation_axis"] == "y"
        assert proposal["rotation_angle_deg"] % 15.0 == 0.0
        assert proposal["rotation_angle_deg"] == pytest.approx(45.0)

    def test_euler_mode(self, tabletop_scene):
        goal = goal_moved(tabletop_scene, axis="z", angle_deg=90.0)
        oracle = make_oracle(tabletop_scene, goal)
        oracle.bind_state(tabletop_scene)
        proposal = json.loads(oracle.complete(proposer_request(mode="euler")))
        assert np.allclose(proposal["euler_xyz_deg"], [0, 0, 90])
        assert "rotation_axis" not in proposal

    def test_consistency_with_faithful_evaluator(self, tabletop_scene):
        # Perturbation below both tolerance and the snapping threshold:
        # a forced proposal must be (theta=0, small t_hat).
        unit = axis_length(np.ptp(tabletop_scene.target_canonical_vertices, axis=0))
        cfg_tol = 0.02
        goal = goal_moved(tabletop_scene, delta=(0.5 * cfg_tol, 0, 0), axis="z", angle_deg=3.0)
        oracle = make_oracle(tabletop_scene, goal, position_tol=cfg_tol, rotation_tol_deg=5.0)
        oracle.bind_state(tabletop_scene)
        verdict = json.loads(oracle.complete(evaluator_request()))
        assert verdict["faithful"] is True
        proposal = json.loads(oracle.complete(proposer_request()))
        assert proposal["rotation_angle_deg"] == 0.0
        assert np.abs(proposal["translation"]).max() <= cfg_tol / unit + 1e-9

    def test_determinism_and_noise_keying(self, tabletop_scene):
        goal = goal_moved(tabletop_scene, delta=(0.1, 0, 0), axis="z", angle_deg=90.0)
        oracle = make_oracle(tabletop_scene, goal, noise_prob=0.9, seed=7)
        oracle.bind_state(tabletop_scene)
        first = oracle.complete(proposer_request(task="a", iteration=1))
        again = oracle.complete(proposer_request(task="a", iteration=1))
        assert first == again  # stateless per-request RNG
        other_iter = oracle.complete(proposer_request(task="a", iteration=2))
        other_task = oracle.complete(proposer_request(task="b", iteration=1))
        assert {first} != {other_iter, other_task} or first != other_iter

    def test_noise_corrupts_but_stays_in_range(self, tabletop_scene):
        goal = goal_moved(tabletop_scene, axis="z", angle_deg=90.0)
        clean = make_oracle(tabletop_scene, goal, noise_prob=0.0)
        noisy = make_oracle(tabletop_scene, goal, noise_prob=0.999, seed=3)
        clean.bind_state(tabletop_scene)
        noisy.bind_state(tabletop_scene)
        base = json.loads(clean.complete(proposer_request()))
        saw_difference = False
        for i in range(8):
            got = json.loads(noisy.complete(proposer_request(task="n", iteration=i)))
            angle = got.get("rotation_angle_deg", 0.0)
            assert -180.0 <= angle <= 180.0
            assert angle % 15.0 == 0.0
            assert np.abs(got["translation"]).max() <= 3.0
            if got != base:
                saw_difference = True
        assert saw_difference


class FakeResponse:
    def __init__(self, status_code, text="", payload=None):
        self.status_code = status_code
        self.text = text
        self._payload = payload

    def json(self):
        if self._payload is None:
            raise ValueError("not json")
        return self._payload


def chat_body(content):
    return {"choices": [{"message": {"content": content}}]}


class TestHttpBackend:
    def request(self):
        return AgentRequest(role=AgentRole.EVALUATOR, prompt="hello",
                            images=("aGk=",), metadata={"task": "t"})

    def test_passthrough(self):
        posts = []

        def post(url, json=None, headers=None, timeout=None):
            posts.append((url, json, timeout))
            return FakeResponse(200, payload=chat_body('{"ok": 1}'))

        backend = HttpBackend("http://stub/v1/chat", "test-model", post=post,
                              sleep=lambda s: None)
        assert backend.complete(self.request()) == '{"ok": 1}'
        url, payload, timeout = posts[0]
        assert timeout == 120.0
        assert payload["model"] == "test-model"
        assert payload["temperature"] == 0.0
        content = payload["messages"][0]["content"]
        assert content[0] == {"type": "text", "text": "hello"}
        assert content[1]["image_url"]["url"].startswith("data:image/jpeg;base64,")

    def test_retry_on_429_then_success(self):
        responses = [FakeResponse(429), FakeResponse(429),
                     FakeResponse(200, payload=chat_body("done"))]
        sleeps = []
        backend = HttpBackend("http://stub", "m", post=lambda *a, **k: responses.pop(0),
                              sleep=sleeps.append)
        assert backend.complete(self.request()) == "done"
        assert sleeps == [1.0, 2.0]  # exponential backoff base 1, factor 2

    def test_gives_up_after_five_tries(self):
        calls = []
        backend = HttpBackend("http://stub", "m",
                              post=lambda *a, **k: calls.append(1) or FakeResponse(500),
                              sleep=lambda s: None)
        with pytest.raises(BackendUnavailable):
            backend.complete(self.request())
        assert len(calls) == 5

    def test_non_retryable_status(self):
        backend = HttpBackend("http://stub", "m",
                              post=lambda *a, **k: FakeResponse(401, text="denied"),
                              sleep=lambda s: None)
        with pytest.raises(BackendUnavailable) as err:
            backend.complete(self.request())
        assert "401" in str(err.value)

    def test_non_json_body(self):
        backend = HttpBackend("http://stub", "m",
                              post=lambda *a, **k: FakeResponse(200, text="<html>"),
                              sleep=lambda s: None)
        with pytest.raises(ProtocolViolation):
            backend.complete(self.request())


class TestRecordReplay:
    def test_record_then_replay(self, tmp_path):
        class Fixed:
            def complete(self, request):
                return f"answer to {request.metadata['n']}"

        path = tmp_path / "transcript.jsonl"
        recorder = RecordBackend(Fixed(), path)
        req1 = AgentRequest(role=AgentRole.PROPOSER, prompt="p1", images=("aW1n",),
                            metadata={"n": 1})
        req2 = AgentRequest(role=AgentRole.PROPOSER, prompt="p2", metadata={"n": 2})
        first = recorder.complete(req1)
        second = recorder.complete(req2)

        replay = ReplayBackend(path)
        assert replay.complete(req1) == first
        assert replay.complete(req2) == second

    def test_replay_miss_on_altered_prompt(self, tmp_path):
        class Fixed:
            def complete(self, request):
                return "x"

        path = tmp_path / "t.jsonl"
        recorder = RecordBackend(Fixed(), path)
        req = AgentRequest(role=AgentRole.EVALUATOR, prompt="original", metadata={})
        recorder.complete(req)
        altered = AgentRequest(role=AgentRole.EVALUATOR, prompt="changed", metadata={})
        with pytest.raises(ReplayMiss):
            ReplayBackend(path).complete(altered)

    def test_transcript_is_versioned_jsonl(self, tmp_path):
        class Fixed:
            def complete(self, request):
                return "r"

        path = tmp_path / "t.jsonl"
        recorder = RecordBackend(Fixed(), path)
        recorder.complete(AgentRequest(role=AgentRole.EVALUATOR, prompt="a", metadata={}))
        recorder.complete(AgentRequest(role=AgentRole.EVALUATOR, prompt="b", metadata={}))
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 3
        header = json.loads(lines[0])
        assert header == {"poseloop_transcript": 1}
        for line in lines[1:]:
            entry = json.loads(line)
            assert {"key", "role", "prompt", "response"} <= set(entry)

    def test_key_depends_on_images(self):
        a = AgentRequest(role=AgentRole.EVALUATOR, prompt="p", images=("QQ==",))
        b = AgentRequest(role=AgentRole.EVALUATOR, prompt="p", images=("Qg==",))
        c = AgentRequest(role=AgentRole.EVALUATOR, prompt="p", images=("QQ==",))
        assert request_key(a) != request_key(b)
        assert request_key(a) == request_key(c)


class TestOracleConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            OracleConfig(goal_pose=RigidPose.identity(), position_tol=0.0)
        with pytest.raises(ValueError):
            OracleConfig(goal_pose=RigidPose.identity(), noise_prob=1.0)

    def test_selection_single_object_fallback(self):
        from poseloop.backends import OracleBackend
        from poseloop.meshes import box_mesh
        from poseloop.scene import SceneObject, SceneState

        bv, bf = box_mesh((0.1, 0.1, 0.1))
        scene = SceneState(objects=(SceneObject("solo", "solo", bv, bf),))
        oracle = OracleBackend(OracleConfig(goal_pose=RigidPose.identity()))
        oracle.bind_state(scene)
        request = AgentRequest(role=AgentRole.SELECTION, prompt="pick",
                               metadata={"stage": "objects"})
        answer = json.loads(oracle.complete(request))
        assert answer["target"] == "solo"
        assert answer["related"] == []
