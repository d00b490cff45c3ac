import json

import numpy as np
import pytest

from mprlab.errors import ConfigError
from mprlab.tracks import OBJECT, compensate_background, frame_deltas
from mprlab.worldsim import (
    CornerFold, CorpusSpec, EnvState, HingedDoor, generate_corpus, generate_episode,
    load_corpus, make_env, rollout, save_corpus, scripted_failure, scripted_success,
)
from mprlab.worldsim.envs import A_MAX, N_OBJECT_POINTS


def _attached_door(angle=0.3):
    env = HingedDoor()
    s = EnvState(env.handle(angle), grip_closed=True, attached=True, door_angle=angle)
    return env, s


class TestDynamics:
    def test_arc_geometry(self):
        env = HingedDoor()
        assert env.arc_step(0.3, 0.025 * env.tangent(0.3)) == pytest.approx(0.4, abs=1e-12)

    def test_human_tangential_step(self):
        env = HingedDoor("human")
        s = EnvState(env.handle(0.3), grip_closed=True, attached=True, door_angle=0.3)
        s2, _, _ = env.step(s, np.r_[env.tangent(0.3) * 0.025 / env.a_max, 1.0])
        assert s2.door_angle - 0.3 == pytest.approx(0.1, abs=1e-12)

    def test_attached_step_tangential(self):
        env, s = _attached_door(0.3)
        s2, _, _ = env.step(s, np.r_[env.tangent(0.3), 1.0])
        assert s2.door_angle - 0.3 == pytest.approx(A_MAX / HingedDoor.LENGTH, abs=1e-12)
        np.testing.assert_allclose(s2.gripper, env.handle(s2.door_angle))

    def test_free_move(self):
        env = HingedDoor()
        s = EnvState(np.array([0.3, 0.3]), door_angle=0.1)
        s2, done, _ = env.step(s, [1.0, 0.0, -1.0])
        np.testing.assert_allclose(s2.gripper, [0.32, 0.3])
        assert s2.door_angle == 0.1 and not done

    def test_action_clipped(self):
        env = HingedDoor()
        s = EnvState(np.array([0.3, 0.3]))
        s2, _, _ = env.step(s, [5.0, -7.0, 0.0])
        np.testing.assert_allclose(s2.gripper, [0.32, 0.28])

    def test_fold_success_on_release(self):
        env = CornerFold()
        s = EnvState(env.FIXED + 0.01, grip_closed=True, attached=True, corner=env.FIXED + 0.01)
        s2, done, info = env.step(s, [0.0, 0.0, -1.0])
        assert done and info["success"] and s2.success

    def test_grasp_only_on_closing(self):
        env = HingedDoor()
        s = EnvState(env.handle(0.0) + [0.0, -0.1], grip_closed=True, door_angle=0.0)
        for _ in range(5):
            s, _, _ = env.step(s, [0.0, 1.0, 1.0])
        assert not s.attached and s.door_angle == 0.0

    def test_horizon(self):
        env = HingedDoor(horizon=5)
        s = env.reset(np.random.default_rng(0))
        for i in range(5):
            s, done, _ = env.step(s, [0, 0, -1])
        assert done and s.t == 5

    def test_angle_step_bounded(self):
        env, s = _attached_door(0.5)
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = np.r_[rng.uniform(-1, 1, 2), 1.0]
            s2, _, _ = env.step(s, a)
            assert abs(s2.door_angle - s.door_angle) <= A_MAX / env.LENGTH + 1e-12
            assert 0.0 <= s2.door_angle <= np.pi / 2
            s = s2

    def test_unknown_env(self):
        with pytest.raises(ConfigError):
            make_env("wipe_counter")


class TestRender:
    def test_closed_door_collinear(self):
        env = HingedDoor()
        f = env.render_tracks(EnvState(np.array([0.1, 0.1]), door_angle=0.0))
        obj = f.points[f.labels == OBJECT]
        assert len(obj) == N_OBJECT_POINTS
        np.testing.assert_allclose(obj[:, 1], 0.5)
        np.testing.assert_allclose(obj[-1], [0.95, 0.5])

    def test_background_static(self):
        env, s = _attached_door(0.2)
        s2, _, _ = env.step(s, np.r_[env.tangent(0.2) * 0.25 / 0.02 * 0.1 / 12.5, 1.0])
        ds = frame_deltas(env.render_tracks(s), env.render_tracks(s2))
        np.testing.assert_array_equal(ds.deltas[ds.labels == 1], 0.0)

    def test_tip_chord(self):
        env = HingedDoor()
        for dtheta in (0.001, 0.005, 0.01):
            a = env.object_points(EnvState(np.zeros(2), door_angle=0.4))[-1]
            b = env.object_points(EnvState(np.zeros(2), door_angle=0.4 + dtheta))[-1]
            d = np.linalg.norm(b - a)
            assert d == pytest.approx(2 * env.LENGTH * np.sin(dtheta / 2), abs=1e-12)
            assert d == pytest.approx(env.LENGTH * dtheta, abs=1e-6)

    def test_agent_occlusion(self):
        env = HingedDoor()
        s = EnvState(env.handle(0.0) - [0.02, 0.0], door_angle=0.0)
        f = env.render_tracks(s)
        assert not f.visible[:N_OBJECT_POINTS].all()

    def test_fold_interior_fraction(self):
        env = CornerFold()
        s0 = EnvState(np.zeros(2), corner=env.START.copy())
        s1 = EnvState(np.zeros(2), corner=env.START + [0.1, -0.05])
        d = env.object_points(s1) - env.object_points(s0)
        np.testing.assert_allclose(d, np.outer(env._weights, [0.1, -0.05]), atol=1e-15)

    def test_state_consistency(self):
        rec = scripted_success("hinged_door", np.random.default_rng(2))
        env = HingedDoor()
        for s, f in zip(rec.states, rec.tracks.frames):
            np.testing.assert_array_equal(env.render_tracks(s).points, f.points)


class TestExpert:
    @pytest.mark.parametrize("env_id", ["hinged_door", "corner_fold"])
    def test_noise_free_success(self, env_id):
        spec = CorpusSpec(env_id=env_id, hesitation_prob=0.0, expert_noise_std=0.0,
                          camera_jitter_std=0.0, embodiment="robot")
        for i in range(10):
            rec = generate_episode(spec, i)
            assert rec.success and rec.length <= 100
            assert len(rec.tracks.frames) == rec.length + 1

    def test_full_pause_fails(self):
        spec = CorpusSpec(hesitation_prob=1.0, pause_min=100, pause_max=100)
        rec = generate_episode(spec, 0)
        assert not rec.success and rec.length == 100

    def test_determinism(self):
        spec = CorpusSpec(expert_noise_std=0.0, embodiment="robot")
        a, b = generate_episode(spec, 3), generate_episode(spec, 3)
        np.testing.assert_array_equal(a.actions, b.actions)

    def test_pause_leaves_other_streams(self):
        paused = generate_episode(CorpusSpec(hesitation_prob=0.1, seed=4), 0)
        plain = generate_episode(CorpusSpec(hesitation_prob=0.0, seed=4), 0)
        np.testing.assert_array_equal(paused.tracks.frames[0].points[:N_OBJECT_POINTS],
                                      plain.tracks.frames[0].points[:N_OBJECT_POINTS])


class TestCorpus:
    def test_jitter_recovered(self):
        spec = CorpusSpec(camera_jitter_std=0.004, hesitation_prob=0.0)
        rec = generate_episode(spec, 0)
        clean = rollout(HingedDoor("human"), lambda s: np.zeros(3), np.random.default_rng(0))
        assert clean  # smoke
        frames = rec.tracks.frames
        for f0, f1 in zip(frames, frames[1:]):
            ds = frame_deltas(f0, f1)
            bg = ds.labels == 1
            # static background points move only by the injected jitter
            jitter = ds.deltas[bg].mean(axis=0)
            assert np.abs(ds.deltas[bg] - jitter).max() < 1e-3

    def test_jitter_neutrality(self):
        base = CorpusSpec(camera_jitter_std=0.0, hesitation_prob=0.0, seed=9)
        noisy = CorpusSpec(camera_jitter_std=0.004, hesitation_prob=0.0, seed=9)
        a, b = generate_episode(base, 1), generate_episode(noisy, 1)
        tol = 2 * 0.004 / np.sqrt(60) + 1e-6
        for i in range(a.length):
            da = compensate_background(frame_deltas(a.tracks.frames[i], a.tracks.frames[i + 1]))
            db = compensate_background(frame_deltas(b.tracks.frames[i], b.tracks.frames[i + 1]))
            obj = da.labels == OBJECT
            assert np.abs(da.deltas[obj] - db.deltas[obj]).max() <= tol

    def test_zero_noise_matches_expert(self):
        spec = CorpusSpec(hesitation_prob=0.0, camera_jitter_std=0.0, expert_noise_std=0.0,
                          n_episodes=3)
        recs, _ = generate_corpus(spec)
        for i, rec in enumerate(recs):
            again = generate_episode(spec, i)
            for f, g in zip(rec.tracks.frames, again.tracks.frames):
                np.testing.assert_array_equal(f.points, g.points)

    def test_two_hundred_successes(self):
        recs, stats = generate_corpus(CorpusSpec(n_episodes=200))
        assert len(recs) == 200 and all(r.success for r in recs)
        assert stats["n_generated"] >= 200
        assert all(r.tracks.source == "human_corpus" for r in recs)

    def test_unreachable_raises(self):
        with pytest.raises(ConfigError):
            generate_corpus(CorpusSpec(n_episodes=5, hesitation_prob=1.0,
                                       pause_min=100, pause_max=100))

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            CorpusSpec(hesitation_prob=1.5)
        with pytest.raises(ConfigError):
            CorpusSpec(camera_jitter_std=-1)

    def test_save_load(self, tmp_path):
        spec = CorpusSpec(n_episodes=2, embodiment="robot")
        recs, stats = generate_corpus(spec)
        path = save_corpus(tmp_path / "c.jsonl", recs, spec, stats)
        manifest = json.loads((tmp_path / "c.jsonl.manifest.json").read_text())
        assert manifest["n_generated"] == 2 and manifest["seed"] == 0
        back = load_corpus(path)
        assert back[0].states is not None and back[0].actions.shape == (back[0].length, 3)
        np.testing.assert_allclose(back[1].actions, recs[1].actions, rtol=1e-8)


class TestFailures:
    def test_miss_handle_object_static(self):
        for seed in range(5):
            rec = scripted_failure("hinged_door", "miss_handle", np.random.default_rng(seed))
            obj = np.stack([f.points[:N_OBJECT_POINTS] for f in rec.tracks.frames])
            assert not rec.success
            assert np.abs(obj - obj[0]).max() < 1e-9

    def test_stall_freezes(self):
        rec = scripted_failure("hinged_door", "stall", np.random.default_rng(0))
        pts = np.stack([f.points for f in rec.tracks.frames])
        moving = np.abs(np.diff(pts, axis=0)).max(axis=(1, 2)) > 0
        freeze = int(np.flatnonzero(moving).max()) + 1
        assert freeze < rec.length and not moving[freeze:].any()

    def test_miss_handle_mimics_success_arc(self):
        rng_a, rng_b = np.random.default_rng(7), np.random.default_rng(7)
        ok = scripted_success("hinged_door", rng_a)
        miss = scripted_failure("hinged_door", "miss_handle", rng_b)
        dg_ok = np.diff([s.gripper for s in ok.states], axis=0)[[s.attached for s in ok.states[1:]]]
        dg_ok = dg_ok[np.linalg.norm(dg_ok, axis=1) > 0]
        grip = np.array([s.grip_closed for s in miss.states[1:]])
        dg_miss = np.diff([s.gripper for s in miss.states], axis=0)[grip]
        dg_miss = dg_miss[np.linalg.norm(dg_miss, axis=1) > 0]
        n = min(len(dg_ok), len(dg_miss))
        assert n >= 10
        cos = (dg_ok[:n] * dg_miss[:n]).sum(1) / (
            np.linalg.norm(dg_ok[:n], axis=1) * np.linalg.norm(dg_miss[:n], axis=1))
        assert cos.min() > 0.99

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            scripted_failure("hinged_door", "flail", np.random.default_rng(0))
