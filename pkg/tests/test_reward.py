import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mprlab.errors import ConfigError
from mprlab.predictor import MotionPredictor
from mprlab.reward import (
    MPRProvider, PrivilegedDenseProvider, SparseProvider, TemporalDistanceProvider,
    TemporalValueRegressor, label_episode, make_provider, mpr_reward, temporal_reward,
    value_dataset, value_features, value_targets, write_reward_csv,
)
from mprlab.tracks import BACKGROUND, OBJECT, TrackFrame, TrackSequence
from mprlab.worldsim import (
    CorpusSpec, EnvState, EpisodeRecord, HingedDoor, generate_corpus, rollout,
    scripted_failure, scripted_success,
)
from oracles import mpr_scalar


def _rot(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


class TestMPRExamples:
    def test_perfect(self):
        d = np.array([[0.01, 0.0], [0.0, 0.02]])
        r = mpr_reward(d, d, [OBJECT, OBJECT])
        assert r.reward == 0.0 and r.raw == 1.0

    def test_opposite(self):
        d = np.array([[0.01, 0.0], [0.0, 0.02]])
        assert mpr_reward(d, -d, [OBJECT, OBJECT]).reward == -1.0

    def test_half(self):
        pred = np.array([[0.01, 0.0], [0.01, 0.0]])
        track = np.array([[0.02, 0.0], [0.0, 0.02]])
        assert mpr_reward(pred, track, [OBJECT, OBJECT]).reward == pytest.approx(-0.5)

    def test_masks_drop_background(self):
        pred = np.array([[0.01, 0.0], [0.01, 0.0]])
        track = np.array([[0.01, 0.0], [-0.01, 0.0]])
        assert mpr_reward(pred, track, [OBJECT, BACKGROUND]).reward == 0.0
        assert mpr_reward(pred, track, [OBJECT, BACKGROUND], use_masks=False).reward == -0.5

    def test_pad_slots_ignored(self):
        pred = np.array([[0.01, 0.0], [0.01, 0.0]])
        track = np.array([[0.01, 0.0], [-0.01, 0.0]])
        r = mpr_reward(pred, track, [OBJECT, OBJECT], pad_mask=[False, True])
        assert r.reward == 0.0 and r.n_contributing == 1

    def test_small_motion_contributes_zero(self):
        pred = np.array([[0.01, 0.0], [0.01, 0.0]])
        track = np.array([[0.01, 0.0], [5e-5, 0.0]])
        assert mpr_reward(pred, track, [OBJECT, OBJECT]).reward == pytest.approx(-0.5)

    def test_no_contributing_slots_degenerate(self):
        d = np.array([[0.01, 0.0]])
        r = mpr_reward(d, d, [BACKGROUND])
        assert r.reward == -1.0 and r.degenerate

    def test_all_static_degenerate(self):
        d = np.zeros((3, 2))
        r = mpr_reward(d, d, [OBJECT] * 3)
        assert r.reward == -1.0 and r.degenerate


def _delta_sets(rng, n=None):
    n = n or int(rng.integers(1, 40))
    pred = rng.normal(0, 0.01, size=(n, 2))
    track = rng.normal(0, 0.01, size=(n, 2))
    # sprinkle exact zeros and sub-threshold motion
    pred[rng.random(n) < 0.1] = 0.0
    track[rng.random(n) < 0.1] *= 1e-3
    labels = rng.choice([OBJECT, BACKGROUND, 2], size=n, p=[0.6, 0.3, 0.1])
    pad = rng.random(n) < 0.2
    return pred, track, labels, pad


def test_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        pred, track, labels, pad = _delta_sets(rng)
        for masks in (True, False):
            got = mpr_reward(pred, track, labels, use_masks=masks, pad_mask=pad)
            ref, deg = mpr_scalar(pred, track, labels, masks, pad)
            assert abs(got.reward - ref) <= 1e-9 and got.degenerate == deg


finite = st.floats(-0.05, 0.05, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.2, 1e3), st.floats(-np.pi, np.pi))
def test_invariances(seed, lam, theta):
    pred, track, labels, pad = _delta_sets(np.random.default_rng(seed))
    # keep norms away from the threshold so scaling cannot cross it
    pred[np.linalg.norm(pred, axis=1) < 1e-3] = 0.0
    track[np.linalg.norm(track, axis=1) < 1e-3] = 0.0
    base = mpr_reward(pred, track, labels, pad_mask=pad).reward
    assert -1.0 <= base <= 0.0
    scaled = mpr_reward(lam * pred, lam * track, labels, pad_mask=pad).reward
    R = _rot(theta)
    rotated = mpr_reward(pred @ R.T, track @ R.T, labels, pad_mask=pad).reward
    assert scaled == pytest.approx(base, abs=1e-12)
    assert rotated == pytest.approx(base, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(finite, finite, finite, finite), min_size=1, max_size=30))
def test_range(rows):
    a = np.array(rows)
    r = mpr_reward(a[:, :2], a[:, 2:], [OBJECT] * len(a))
    assert -1.0 <= r.reward <= 0.0


def _door_episode(angles, gripper=(0.2, 0.2)):
    env = HingedDoor()
    states = [EnvState(np.array(gripper, float), door_angle=a, t=i) for i, a in enumerate(angles)]
    frames = [env.render_tracks(s) for s in states]
    return EpisodeRecord("synthetic", "hinged_door", TrackSequence(frames), True, states,
                         np.zeros((len(states) - 1, 3)))


class _OraclePredictor:
    """Returns the true next points, i.e. a perfect predictor."""

    def predict_raw(self, items):
        return [it.raw_target for it in items]


class TestMPRProvider:
    def test_perfect_tracking_gives_zero(self):
        ep = _door_episode(np.linspace(0.1, 0.8, 12))
        lab = label_episode(MPRProvider(_OraclePredictor(), "hinged_door"), ep)
        assert len(lab) == 11
        np.testing.assert_allclose(lab.rewards, 0.0, atol=1e-12)

    def test_zero_length(self):
        ep = _door_episode([0.1])
        assert len(label_episode(MPRProvider(_OraclePredictor()), ep)) == 0

    def test_miss_handle_all_minus_one(self):
        ep = scripted_failure("hinged_door", "miss_handle", np.random.default_rng(0))
        model = MotionPredictor().initialize()
        for p in model.net_.parameters():
            p.data = p.data + 0.1
        lab = label_episode(MPRProvider(model, "hinged_door"), ep)
        assert np.all(lab.rewards == -1.0)

    def test_env_mismatch(self):
        ep = _door_episode([0.1, 0.2])
        with pytest.raises(ConfigError):
            label_episode(MPRProvider(_OraclePredictor(), "corner_fold"), ep)

    def test_resample_transition_degenerate(self):
        ep = _door_episode(np.linspace(0.1, 0.8, 8))
        ep.tracks.resample_events = [4]
        lab = label_episode(MPRProvider(_OraclePredictor()), ep)
        assert lab.rewards[3] == -1.0 and lab.degenerate[3]
        assert lab.rewards[4] == pytest.approx(0.0)

    def test_locality_under_pause(self):
        angles = list(np.linspace(0.1, 0.9, 10))
        paused = angles[:6] + [angles[5]] * 4 + angles[6:]
        model = MotionPredictor(d_model=8, context_width=8).initialize()
        rng = np.random.default_rng(0)
        for p in model.net_.parameters():
            p.data = p.data + rng.normal(0, 0.2, size=p.shape)
        prov = MPRProvider(model)
        a = label_episode(prov, _door_episode(angles)).rewards
        b = label_episode(prov, _door_episode(paused)).rewards
        np.testing.assert_array_equal(a[:4], b[:4])


class TestPrivilegedAndSparse:
    def test_full_opening_sum(self):
        goal = HingedDoor.SUCCESS_ANGLE
        angles = np.linspace(0.0, goal, 30)
        ep = _door_episode(angles)
        for s in ep.states:
            s.success = s.door_angle >= goal
        T = len(angles) - 1
        r = label_episode(PrivilegedDenseProvider("hinged_door"), ep).rewards
        assert r.sum() == pytest.approx(1 - 0.01 * T + 1)

    def test_no_motion(self):
        ep = _door_episode([0.3] * 5)
        r = label_episode(PrivilegedDenseProvider(), ep).rewards
        np.testing.assert_allclose(r, -0.01)

    def test_sparse_success_episode(self):
        ep = scripted_success("hinged_door", np.random.default_rng(1))
        r = label_episode(SparseProvider(), ep).rewards
        assert r[-1] == 1.0 and r[:-1].sum() == 0.0

    def test_fold_dense_progress(self):
        ep = scripted_success("corner_fold", np.random.default_rng(0))
        r = label_episode(PrivilegedDenseProvider("corner_fold"), ep).rewards
        assert r[-1] > 0.9 and r.sum() > 1.0

    def test_needs_states(self):
        ep = _door_episode([0.1, 0.2])
        ep.states = None
        with pytest.raises(ConfigError):
            label_episode(SparseProvider(), ep)


class TestTemporal:
    def test_targets(self):
        y = value_targets(11)
        assert y[0] == -1.0 and y[-1] == 0.0 and y[5] == -0.5

    def test_features_width(self):
        ep = scripted_success("hinged_door", np.random.default_rng(0))
        assert value_features(ep.tracks.frames[0]).shape == (66,)

    def test_empty_corpus(self):
        with pytest.raises(ConfigError):
            TemporalValueRegressor().fit_episodes([])

    def test_reward_telescopes(self):
        recs, _ = generate_corpus(CorpusSpec(n_episodes=6))
        net = TemporalValueRegressor(hidden=(32, 32), epochs=5).fit_episodes(recs)
        frames = recs[0].tracks.frames
        assert temporal_reward(net, frames[3], frames[3]) == 0.0
        r = label_episode(TemporalDistanceProvider(net), recs[0]).rewards
        v = net.values(frames)
        assert r.sum() == pytest.approx(v[-1] - v[0], abs=1e-12)

    def test_learns_progress(self):
        recs, _ = generate_corpus(CorpusSpec(n_episodes=30))
        net = TemporalValueRegressor(hidden=(64, 64), epochs=40).fit_episodes(recs)
        X, y, _ = value_dataset(recs)
        assert np.corrcoef(net.predict(X), y)[0, 1] > 0.8

    def test_save_load(self, tmp_path):
        recs, _ = generate_corpus(CorpusSpec(n_episodes=4))
        net = TemporalValueRegressor(hidden=(16,), epochs=2).fit_episodes(recs)
        path = net.save(tmp_path / "v.ckpt")
        back = TemporalValueRegressor.load(path)
        X, _, _ = value_dataset(recs)
        np.testing.assert_array_equal(back.predict(X), net.predict(X))


def test_make_provider_errors():
    with pytest.raises(ConfigError):
        make_provider("mpr", "hinged_door")
    with pytest.raises(ConfigError):
        make_provider("vip", "hinged_door")
    assert make_provider("sparse", "hinged_door").kind == "sparse"


def test_reward_csv(tmp_path):
    ep = _door_episode([0.3] * 4)
    lab = label_episode(PrivilegedDenseProvider(), ep)
    text = write_reward_csv(tmp_path / "r.csv", lab).read_text().splitlines()
    assert text[0] == "t,reward,degenerate_flag,provider_kind"
    assert text[1] == "0,-0.01,0,privileged_dense" and len(text) == 4
