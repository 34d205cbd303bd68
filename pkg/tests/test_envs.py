import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from scq import envs
from scq.envs import Dataset, ScoreScale, make_env


MAZE = make_env("point-maze")
PUSH = make_env("push-slide")
BANDIT = make_env("line-bandit")


def test_env_spec_validation():
    with pytest.raises(ValueError):
        envs.EnvSpec("x", 1, 1, ((1.0, 0.0),), 5, "dense")
    with pytest.raises(ValueError):
        envs.EnvSpec("x", 1, 1, ((0.0, 1.0),), 0, "dense")
    with pytest.raises(ValueError):
        envs.EnvSpec("x", 1, 1, ((0.0, 1.0),), 1, "shaped")
    with pytest.raises(ValueError):
        make_env("cartpole")


class TestPointMaze:
    def test_null_action(self):
        s = np.array([0.5, 0.5])
        nxt, r, done = envs.env_step(MAZE, s, np.zeros(2))
        np.testing.assert_array_equal(nxt, s)
        assert r == 0.0 and not done

    def test_goal_cell(self):
        nxt, r, done = envs.env_step(MAZE, np.array([0.5, 2.5]), np.zeros(2))
        assert r == 1.0 and done

    def test_move_and_clip(self):
        nxt, _, _ = envs.env_step(MAZE, np.array([0.5, 0.5]), np.array([5.0, -0.5]))
        np.testing.assert_allclose(nxt, [0.6, 0.45])
        nxt, _, _ = envs.env_step(MAZE, np.array([2.95, 0.02]), np.array([1.0, -1.0]))
        np.testing.assert_allclose(nxt, [3.0, 0.0])

    def test_wall_blocks_vertical_move(self):
        # moving up into the block from below slides along x only
        nxt, _, _ = envs.env_step(MAZE, np.array([1.0, 0.95]), np.array([0.5, 1.0]))
        np.testing.assert_allclose(nxt, [1.05, 0.95])

    def test_wall_blocks_both_axes(self):
        nxt, _, _ = envs.env_step(MAZE, np.array([1.95, 0.95]), np.array([-1.0, 1.0]))
        np.testing.assert_allclose(nxt, [1.85, 0.95])
        nxt, _, _ = envs.env_step(MAZE, np.array([2.05, 1.5]), np.array([-1.0, 0.0]))
        np.testing.assert_allclose(nxt, [2.05, 1.5])

    def test_nan_rejected(self):
        with pytest.raises(ValueError, match="NaN"):
            envs.env_step(MAZE, np.array([np.nan, 0.5]), np.zeros(2))
        with pytest.raises(ValueError, match="NaN"):
            envs.env_step(MAZE, np.array([0.5, 0.5]), np.array([0.0, np.nan]))

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 3), st.floats(0, 3), st.floats(-1, 1), st.floats(-1, 1))
    def test_step_never_enters_block(self, x, y, ax, ay):
        s = np.array([x, y])
        if not envs.maze_free(s)[0]:
            return
        nxt, _, _ = envs.env_step(MAZE, s, np.array([ax, ay]))
        ts = np.linspace(0.0, 1.0, 401)[:, None]
        path = s + ts * (nxt - s)
        assert envs.maze_free(path).all()

    def test_generated_dataset_replays_without_crossing(self):
        for tier in ("random", "medium", "expert"):
            data = envs.generate_dataset(MAZE, tier, 3000, 2)
            assert envs.maze_transitions_valid(data).all()

    def test_replay_detects_crossing(self):
        bad = Dataset(np.array([[1.0, 0.5]]), np.zeros((1, 2)), np.zeros(1),
                      np.array([[1.0, 2.5]]), np.zeros(1, bool))
        assert not envs.maze_transitions_valid(bad)[0]


def test_push_slide_matches_hand_rollout():
    rng = np.random.default_rng(7)
    s0 = envs.reset(PUSH, rng, 1)[0]
    actions = [(1.0, -0.5), (0.3, 0.2), (-1.0, 1.0), (0.0, 0.0), (2.0, -3.0)]
    px, py, vx, vy = (float(v) for v in s0)
    state = s0
    for ax, ay in actions:
        state, r, done = envs.env_step(PUSH, state, np.array([ax, ay]))
        ax, ay = max(-1.0, min(1.0, ax)), max(-1.0, min(1.0, ay))
        vx = vx + 0.1 * (ax - 0.5 * vx)
        vy = vy + 0.1 * (ay - 0.5 * vy)
        px, py = px + 0.1 * vx, py + 0.1 * vy
        expected_r = -(px * px + py * py + 0.1 * (vx * vx + vy * vy) + 0.01 * (ax * ax + ay * ay))
        np.testing.assert_allclose(state, [px, py, vx, vy], rtol=0, atol=1e-14)
        assert r == pytest.approx(expected_r, abs=1e-14)
        assert not done


def test_push_slide_noise_is_seeded():
    noisy = make_env("push-slide", noise_std=0.1)
    s = np.array([0.1, 0.2, 0.0, 0.0])
    a = envs.env_step(noisy, s, np.zeros(2), np.random.default_rng(3))
    b = envs.env_step(noisy, s, np.zeros(2), np.random.default_rng(3))
    np.testing.assert_array_equal(a[0], b[0])
    with pytest.raises(ValueError):
        envs.env_step(noisy, s, np.zeros(2))


def test_line_bandit_shape():
    s = np.zeros((7, 1))
    a = np.array([[-1.0], [-0.5], [0.0], [0.3], [0.5], [0.51], [1.0]])
    r = envs.bandit_reward(s, a)
    assert r[1] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(r[[0, 2, 3, 4]], [0.0, 0.0, 0.3, 0.5], atol=1e-3)
    np.testing.assert_allclose(r[5:], -1.0, atol=1e-12)
    shifted = envs.bandit_reward(np.full((1, 1), 0.5), np.array([[0.35]]))
    assert shifted[0] == pytest.approx(0.3)
    _, _, done = envs.env_step(BANDIT, np.array([0.3]), np.array([0.2]))
    assert done


class TestGenerateDataset:
    def test_empty(self):
        with pytest.raises(ValueError, match="nonempty dataset required"):
            envs.generate_dataset(BANDIT, "random", 0, 0)

    def test_unknown_label(self):
        with pytest.raises(ValueError, match="unknown behavior"):
            envs.generate_dataset(BANDIT, "novice", 10, 0)

    @pytest.mark.parametrize("name", envs.ENV_NAMES)
    @pytest.mark.parametrize("tier", envs.TIERS)
    def test_exact_size_and_bounds(self, name, tier):
        spec = make_env(name)
        data = envs.generate_dataset(spec, tier, 537, 4)
        assert len(data) == 537
        assert data.metadata["behavior"] == tier and data.metadata["size"] == 537
        assert np.all(data.actions >= spec.low) and np.all(data.actions <= spec.high)
        assert data.states.shape == (537, spec.state_dim)

    @pytest.mark.parametrize("name", envs.ENV_NAMES)
    def test_byte_identical(self, name):
        spec = make_env(name)
        a = envs.generate_dataset(spec, "medium-expert-mix", 800, 9)
        b = envs.generate_dataset(spec, "medium-expert-mix", 800, 9)
        assert a.to_bytes() == b.to_bytes()
        c = envs.generate_dataset(spec, "medium-expert-mix", 800, 10)
        assert a.to_bytes() != c.to_bytes()

    def test_random_bandit_actions_uniform(self):
        data = envs.generate_dataset(BANDIT, "random", 10_000, 1)
        bins = np.linspace(-1, 1, 21)
        observed, _ = np.histogram(data.actions[:, 0], bins)
        assert stats.chisquare(observed).pvalue > 0.01
        direct = np.random.default_rng(12345).uniform(-1, 1, 10_000)
        reference, _ = np.histogram(direct, bins)
        assert stats.chi2_contingency(np.vstack([observed, reference]))[1] > 0.01

    def test_mix_interleaves_half_and_half(self):
        data = envs.generate_dataset(BANDIT, "medium-expert-mix", 1000, 3)
        s, a = data.states[:, 0].astype(float), data.actions[:, 0].astype(float)
        resid_med = np.abs(a - 0.25 - 0.1 * s)
        resid_exp = np.abs(a + 0.5 - 0.1 * s)
        assert np.all(resid_med[0::2] < 0.4) and np.all(resid_exp[1::2] < 0.2)
        assert np.median(resid_exp[1::2]) < np.median(resid_exp[0::2])

    def test_mix_replay_keeps_whole_episodes(self):
        data = envs.generate_dataset(MAZE, "medium-replay-mix", 2000, 5)
        assert len(data) == 2000
        breaks = np.flatnonzero(~data.dones[:-1] & np.any(data.states[1:] != data.next_states[:-1], axis=1))
        assert len(breaks) >= 2


class TestSubsample:
    data = envs.generate_dataset(BANDIT, "medium", 100, 0)

    def test_identity(self):
        sub = envs.subsample(self.data, 1.0, 3)
        assert sorted(map(bytes, sub.actions)) == sorted(map(bytes, self.data.actions))
        assert sub.metadata["fraction"] == 1.0

    def test_half(self):
        assert len(envs.subsample(self.data, 0.5, 3)) == 50
        assert len(envs.subsample(self.data, 0.333, 3)) == 33

    def test_rerun_same_indices(self):
        a = envs.subsample(self.data, 0.1, 8)
        b = envs.subsample(self.data, 0.1, 8)
        assert a.to_bytes() == b.to_bytes()
        np.testing.assert_array_equal(envs.subsample_indices(100, 0.1, 8), envs.subsample_indices(100, 0.1, 8))

    @pytest.mark.parametrize("frac", [0.0, -0.2, 1.5])
    def test_bad_fraction(self, frac):
        with pytest.raises(ValueError):
            envs.subsample(self.data, frac, 0)

    def test_empty_result(self):
        with pytest.raises(ValueError):
            envs.subsample(self.data, 0.001, 0)


class TestNormalizedScore:
    scale = ScoreScale(-20.0, 80.0)

    def test_anchors(self):
        assert envs.normalized_score(self.scale, -20.0) == 0.0
        assert envs.normalized_score(self.scale, 80.0) == 100.0
        assert envs.normalized_score(self.scale, 30.0) == 50.0

    def test_invalid_scale(self):
        with pytest.raises(ValueError):
            ScoreScale(1.0, 1.0)

    @given(st.floats(-100, 100), st.floats(0.1, 50), st.floats(-1e3, 1e3),
           st.floats(0.01, 100), st.floats(-100, 100))
    def test_affine_invariance(self, lo, width, raw, scale, shift):
        base = envs.normalized_score(ScoreScale(lo, lo + width), raw)
        moved = envs.normalized_score(ScoreScale(lo * scale + shift, (lo + width) * scale + shift), raw * scale + shift)
        assert moved == pytest.approx(base, rel=1e-9, abs=1e-6)

    def test_fixture_matches_recomputation(self):
        stored = envs.load_score_scales()
        for name in envs.ENV_NAMES:
            assert envs.compute_score_scale(make_env(name)) == stored[name]

    def test_scale_ordering(self):
        for sc in envs.load_score_scales().values():
            assert sc.expert_score > sc.random_score


class TestFileFormats:
    data = envs.generate_dataset(MAZE, "medium", 300, 1)

    def test_header_layout(self):
        blob = self.data.to_bytes()
        assert blob[:4] == b"SCQD"
        assert struct.unpack_from("<I", blob, 4)[0] == 1
        (n_head,) = struct.unpack_from("<I", blob, 8)
        (n_states,) = struct.unpack_from("<Q", blob, 12 + n_head)
        assert n_states == 300 * 2 * 4
        # dones column is one byte per transition at the very end
        assert blob[-300:] == self.data.dones.astype("u1").tobytes()

    def test_binary_round_trip(self, tmp_path):
        path = tmp_path / "d.scqd"
        self.data.save(path)
        back = Dataset.load(path)
        assert back.to_bytes() == self.data.to_bytes()
        assert back.metadata == self.data.metadata

    def test_csv_round_trip(self, tmp_path):
        path = tmp_path / "d.csv"
        self.data.to_csv(path)
        assert Dataset.from_csv(path).to_bytes() == self.data.to_bytes()

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            Dataset.from_bytes(b"XXXX" + self.data.to_bytes()[4:])

    def test_immutable(self):
        with pytest.raises(ValueError):
            self.data.rewards[0] = 3.0

    def test_transition_access(self):
        t = self.data[0]
        assert t.state.shape == (2,) and isinstance(t.done, bool)


def test_return_scale_hand_example():
    s = np.array([[0.0], [1.0], [2.0], [5.0]])
    ns = np.array([[1.0], [2.0], [3.0], [6.0]])
    r = np.array([1.0, 0.0, 0.4, -4.0])
    d = np.array([False, False, True, False])
    data = Dataset(s, np.zeros((4, 1)), r, ns, d)
    # first episode return-to-go from t=0: 1 + 0.5*0 + 0.25*0.4 = 1.1; second: -4
    assert envs.empirical_return_scale(data, 0.5) == pytest.approx(4.0)
    assert envs.empirical_return_scale(Dataset(s[:3], np.zeros((3, 1)), r[:3], ns[:3], d[:3]), 0.5) == pytest.approx(1.1)
