"""Tying structure, link functions, blankets and the dense joint."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convdef.expfam import GammaParams, gamma_logpdf, poisson_logpmf
from convdef.model import (
    ConfigurationError,
    LatentState,
    ModelSpec,
    RATE_FLOOR,
    TiedWeightMatrix,
    TyingMap,
    blanket_logp_w,
    blanket_logp_z,
    build_tying,
    linked_params,
    log_joint,
    log_joint_all,
    model_spec_from_dict,
    obs_rate,
)

# every tying configuration the experiments use: (rows, filter, stride) -> cols
PAPER_CONFIGS = [
    (27489, 539, 539, 51),
    (51, 3, 3, 17),
    (51, 3, 2, 25),
    (51, 3, 1, 49),
    (27489, 1617, 1617, 17),
    (27489, 1617, 1078, 25),
    (27489, 1617, 539, 49),
]


def random_tiny_model(rng, max_layers=3):
    """Random small spec plus positive weights and latents, away from the
    rate floor so perturbation tests stay in the smooth region."""
    obs_dim = int(rng.integers(3, 9))
    n_layers = int(rng.integers(1, max_layers + 1))
    layer_cfgs = []
    rows = obs_dim
    for _ in range(n_layers):
        for _ in range(200):
            filt = int(rng.integers(1, min(rows, 5) + 1))
            stride = int(rng.integers(1, filt + 1))
            if (rows - filt) % stride == 0:
                cols = (rows - filt) // stride + 1
                if cols <= 5:
                    break
        else:
            raise AssertionError("no valid tying found")
        layer_cfgs.append((filt, stride, float(rng.uniform(0.3, 0.9))))
        rows = cols
    spec = ModelSpec.from_filters(
        obs_dim, layer_cfgs, GammaParams(0.4, 0.4), GammaParams(0.5, 0.8)
    )
    weights = [
        TiedWeightMatrix(t, rng.uniform(0.3, 1.5, t.n_params))
        for t in spec.weight_tyings
    ]
    state = LatentState(z=[rng.uniform(0.3, 2.0, l.size) for l in spec.layers])
    return spec, weights, state


class TestTying:
    def test_matches_five_by_three_pattern(self):
        # the canonical filter-3 stride-1 pattern on a 5x3 matrix
        t = build_tying(5, 3, 1)
        assert t.cols == 3
        w = TiedWeightMatrix(t, np.array([11.0, 21.0, 31.0]))
        want = np.array(
            [
                [11.0, 0.0, 0.0],
                [21.0, 11.0, 0.0],
                [31.0, 21.0, 11.0],
                [0.0, 31.0, 21.0],
                [0.0, 0.0, 31.0],
            ]
        )
        np.testing.assert_array_equal(w.materialize(), want)

    @pytest.mark.parametrize("rows,filt,stride,want", PAPER_CONFIGS)
    def test_experiment_configs(self, rows, filt, stride, want):
        assert build_tying(rows, filt, stride).cols == want

    def test_indivisible_raises_with_name(self):
        with pytest.raises(ConfigurationError, match="layer 7"):
            build_tying(6, 3, 2, name="layer 7")

    def test_filter_exceeds_rows(self):
        with pytest.raises(ConfigurationError):
            build_tying(3, 4, 1)

    def test_nonzero_count_and_distinct_values(self):
        t = build_tying(9, 3, 2)
        w = TiedWeightMatrix(t, np.array([0.5, 1.5, 2.5]))
        dense = w.materialize()
        assert np.count_nonzero(dense) == t.cols * t.filter_size
        assert len(np.unique(dense[dense > 0])) == t.filter_size

    def test_untied_per_column_banks(self):
        t = build_tying(5, 3, 1, tied=False)
        assert t.n_params == 9
        assert t.param_index(2, 1) == 3 + 1
        w = TiedWeightMatrix(t, np.arange(1.0, 10.0))
        dense = w.materialize()
        # column j holds its own bank, not shifted copies
        np.testing.assert_array_equal(dense[1:4, 1], np.array([4.0, 5.0, 6.0]))

    def test_structurally_zero_cell_raises(self):
        t = build_tying(5, 3, 1)
        with pytest.raises(IndexError):
            t.param_index(4, 0)

    @given(st.data())
    @settings(max_examples=60, deadline=None)
    def test_shape_law_and_support(self, data):
        rows = data.draw(st.integers(1, 60))
        filt = data.draw(st.integers(1, rows))
        divisors = [s for s in range(1, rows + 1) if (rows - filt) % s == 0]
        stride = data.draw(st.sampled_from(divisors))
        t = build_tying(rows, filt, stride)
        assert (t.cols - 1) * stride + filt == rows
        for j in (0, t.cols - 1):
            sup = t.column_rows(j)
            assert sup[0] == j * stride and len(sup) == filt
            for i in sup:
                assert t.param_index(i, j) == i - j * stride
        assert t.tie_rows().shape == (t.n_params, t.cols)


class TestLinks:
    def test_mean_equals_inner_product(self):
        p = linked_params(np.array([1.0]), np.array([1.0]), 0.5)
        assert (p.shape, p.rate) == (0.5, 0.5)
        assert p.mean() == pytest.approx(1.0)

    def test_rate_scales_inverse(self):
        p = linked_params(np.array([4.0]), np.array([1.0]), 0.1)
        assert p.shape == 0.1
        assert p.rate == pytest.approx(0.025)

    def test_hand_inner_product(self):
        p = linked_params(np.array([1.0, 2.0, 3.0]), np.array([0.1, 0.2, 0.3]), 0.5)
        assert p.rate == pytest.approx(0.5 / 1.4)
        assert p.mean() == pytest.approx(1.4)

    def test_obs_rate_simple(self):
        assert obs_rate(np.ones(1), np.array([0.5])).rate == pytest.approx(0.5)

    def test_disjoint_support_floors(self):
        p = obs_rate(np.array([0.0, 3.0]), np.array([2.0, 0.0]))
        assert p.rate == RATE_FLOOR

    def test_obs_rate_matches_dense_matvec(self):
        rng = np.random.default_rng(3)
        t = build_tying(7, 3, 2)
        w = TiedWeightMatrix(t, rng.uniform(0.2, 2.0, 3))
        z = rng.uniform(0.1, 3.0, t.cols)
        dense = w.materialize() @ z
        for i in range(7):
            assert obs_rate(z, w.row(i)).rate == pytest.approx(max(dense[i], RATE_FLOOR))

    @given(st.floats(0.05, 0.99), st.floats(0.1, 50.0))
    @settings(max_examples=40, deadline=None)
    def test_mean_property(self, alpha, inner):
        p = linked_params(np.array([inner]), np.array([1.0]), alpha)
        assert p.mean() == pytest.approx(inner, rel=1e-12)


class TestBlankets:
    def test_single_node_blanket_is_whole_joint(self):
        eta = GammaParams(0.4, 0.4)
        spec = ModelSpec.from_filters(1, [(1, 1, 0.5)], eta, GammaParams(0.5, 0.8))
        w = [TiedWeightMatrix(spec.weight_tyings[0], np.array([0.7]))]
        state = LatentState(z=[np.array([1.3])])
        x = np.array([2])
        mask = np.array([True])
        got = blanket_logp_z(spec, state, w, x, mask, 0, 0)
        want = gamma_logpdf(1.3, eta.shape, eta.rate) + poisson_logpmf(2.0, 1.3 * 0.7)
        assert got == pytest.approx(float(want))

    def test_child_set_follows_column_support(self):
        # V=5, K=3, filter 3, stride 1: node k touches rows [k, k+3)
        rng = np.random.default_rng(0)
        spec = ModelSpec.from_filters(
            5, [(3, 1, 0.5)], GammaParams(0.4, 0.4), GammaParams(0.5, 0.8)
        )
        w = [TiedWeightMatrix(spec.weight_tyings[0], rng.uniform(0.3, 1.0, 3))]
        state = LatentState(z=[rng.uniform(0.5, 1.5, 3)])
        x = rng.poisson(2.0, 5).astype(np.int64)
        mask = np.ones(5, bool)
        base = blanket_logp_z(spec, state, w, x, mask, 0, 1)
        touched = []
        for i in range(5):
            x2 = x.copy()
            x2[i] += 1
            if blanket_logp_z(spec, state, w, x2, mask, 0, 1) != base:
                touched.append(i)
        assert touched == [1, 2, 3]

    def test_w_tie_group_rows(self):
        t = build_tying(5, 3, 1)
        np.testing.assert_array_equal(t.tie_rows()[0], [0, 1, 2])
        np.testing.assert_array_equal(t.tie_rows()[1], [1, 2, 3])

    def test_masked_observations_contribute_nothing(self):
        rng = np.random.default_rng(1)
        spec, weights, state = random_tiny_model(rng, max_layers=1)
        x = rng.poisson(2.0, spec.obs_dim).astype(np.int64)
        mask = np.zeros(spec.obs_dim, bool)
        got = blanket_logp_z(spec, state, weights, x, mask, 0, 0)
        want = blanket_logp_z(spec, state, weights, x * 0 + 99, mask, 0, 0)
        assert got == want

    def test_index_errors(self):
        rng = np.random.default_rng(2)
        spec, weights, state = random_tiny_model(rng, max_layers=1)
        x = np.zeros(spec.obs_dim, dtype=np.int64)
        mask = np.ones(spec.obs_dim, bool)
        with pytest.raises(IndexError):
            blanket_logp_z(spec, state, weights, x, mask, 5, 0)
        with pytest.raises(IndexError):
            blanket_logp_w(spec, [state], weights, x[None], mask[None], 0, 99)


class TestBlanketJointConsistency:
    """Changing one coordinate changes the joint by exactly the blanket delta."""

    @pytest.mark.parametrize("seed", range(6))
    def test_z_perturbations(self, seed):
        rng = np.random.default_rng(seed)
        spec, weights, state = random_tiny_model(rng)
        x = rng.poisson(2.0, spec.obs_dim).astype(np.int64)
        mask = rng.random(spec.obs_dim) > 0.3
        base_joint = log_joint(spec, state, weights, x, mask)
        for layer in range(spec.n_layers):
            for k in range(spec.layers[layer].size):
                z2 = [z.copy() for z in state.z]
                z2[layer][k] *= float(rng.uniform(0.5, 2.0))
                s2 = LatentState(z=z2)
                d_joint = log_joint(spec, s2, weights, x, mask) - base_joint
                d_blanket = blanket_logp_z(
                    spec, s2, weights, x, mask, layer, k
                ) - blanket_logp_z(spec, state, weights, x, mask, layer, k)
                assert d_joint == pytest.approx(d_blanket, abs=1e-9)

    @pytest.mark.parametrize("seed", range(6))
    def test_w_perturbations(self, seed):
        rng = np.random.default_rng(100 + seed)
        spec, weights, _ = random_tiny_model(rng)
        n = 3
        states = [
            LatentState(z=[rng.uniform(0.3, 2.0, l.size) for l in spec.layers])
            for _ in range(n)
        ]
        counts = rng.poisson(2.0, (n, spec.obs_dim)).astype(np.int64)
        mask = rng.random((n, spec.obs_dim)) > 0.3
        base = log_joint_all(spec, states, weights, counts, mask)
        for wl in range(spec.n_layers):
            for t in range(spec.weight_tyings[wl].n_params):
                w2 = [TiedWeightMatrix(w.tying, w.free_params.copy()) for w in weights]
                w2[wl].free_params[t] *= float(rng.uniform(0.5, 2.0))
                d_joint = log_joint_all(spec, states, w2, counts, mask) - base
                d_blanket = blanket_logp_w(
                    spec, states, w2, counts, mask, wl, t
                ) - blanket_logp_w(spec, states, weights, counts, mask, wl, t)
                assert d_joint == pytest.approx(d_blanket, abs=1e-9)


def brute_force_log_joint(spec, state, weights, x, mask):
    """Second, test-side implementation of the joint: straight loops over
    every node and cell, dense matrices, no shared code with the library
    beyond the two scalar densities."""
    L = spec.n_layers
    total = 0.0
    for k in range(spec.layers[L - 1].size):
        total += float(
            gamma_logpdf(state.z[L - 1][k], spec.top_prior.shape, spec.top_prior.rate)
        )
    for layer in range(L - 1):
        dense = weights[layer + 1].materialize()
        alpha = spec.layers[layer].fixed_shape
        for i in range(spec.layers[layer].size):
            m = max(float(dense[i] @ state.z[layer + 1]), RATE_FLOOR)
            total += float(gamma_logpdf(state.z[layer][i], alpha, alpha / m))
    for w in weights:
        for v in w.free_params:
            total += float(
                gamma_logpdf(v, spec.weight_prior.shape, spec.weight_prior.rate)
            )
    dense0 = weights[0].materialize()
    for i in range(spec.obs_dim):
        if mask[i]:
            lam = max(float(dense0[i] @ state.z[0]), RATE_FLOOR)
            total += float(poisson_logpmf(float(x[i]), lam))
    return total


class TestLogJoint:
    def test_all_hidden_leaves_priors_only(self):
        rng = np.random.default_rng(4)
        spec, weights, state = random_tiny_model(rng, max_layers=1)
        x = rng.poisson(2.0, spec.obs_dim).astype(np.int64)
        none = np.zeros(spec.obs_dim, bool)
        got = log_joint(spec, state, weights, x, none)
        want = brute_force_log_joint(spec, state, weights, x, none)
        assert got == pytest.approx(want, rel=1e-12)
        # changing hidden observations changes nothing
        assert log_joint(spec, state, weights, x + 7, none) == got

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(200 + seed)
        spec, weights, state = random_tiny_model(rng)
        x = rng.poisson(2.0, spec.obs_dim).astype(np.int64)
        mask = rng.random(spec.obs_dim) > 0.4
        got = log_joint(spec, state, weights, x, mask)
        want = brute_force_log_joint(spec, state, weights, x, mask)
        assert got == pytest.approx(want, rel=1e-12)


class TestDefDegradation:
    def test_one_column_map_is_fully_connected(self):
        # filter = rows, cols = 1: every lower node is a child of the single
        # upper node and the blanket sums all of them
        rng = np.random.default_rng(9)
        spec = ModelSpec.from_filters(
            4, [(2, 2, 0.5), (2, 1, 0.5)], GammaParams(0.4, 0.4), GammaParams(0.5, 0.8)
        )
        # replace the top tying with an untied full column
        untied = build_tying(2, 2, 1, tied=False)
        full = build_tying(2, 2, 2)  # cols = 1
        assert full.cols == 1
        weights = [
            TiedWeightMatrix(spec.weight_tyings[0], rng.uniform(0.3, 1.0, 2)),
            TiedWeightMatrix(full, rng.uniform(0.3, 1.0, 2)),
        ]
        spec_full = ModelSpec(
            obs_dim=4,
            layers=(spec.layers[0], type(spec.layers[0])(size=1, fixed_shape=0.5)),
            weight_tyings=(spec.weight_tyings[0], full),
            top_prior=spec.top_prior,
            weight_prior=spec.weight_prior,
        )
        state = LatentState(z=[rng.uniform(0.5, 1.5, 2), rng.uniform(0.5, 1.5, 1)])
        x = rng.poisson(2.0, 4).astype(np.int64)
        mask = np.ones(4, bool)
        got = blanket_logp_z(spec_full, state, weights, x, mask, 1, 0)
        # by hand: top prior plus both lower conditionals
        alpha = 0.5
        dense = weights[1].materialize()
        want = float(
            gamma_logpdf(state.z[1][0], 0.4, 0.4)
        )
        for i in range(2):
            m = max(float(dense[i] @ state.z[1]), RATE_FLOOR)
            want += float(gamma_logpdf(state.z[0][i], alpha, alpha / m))
        assert got == pytest.approx(want, rel=1e-12)


class TestModelConfig:
    def test_round_trip(self):
        cfg = {
            "obs_dim": 357,
            "layers": [
                {"filter": 7, "stride": 7, "fixed_shape": 0.3},
                {"filter": 3, "stride": 2, "fixed_shape": 0.3},
            ],
            "top_prior": {"shape": 0.1, "rate": 0.1},
            "weight_prior": {"shape": 0.1, "rate": 0.3},
        }
        spec = model_spec_from_dict(cfg)
        assert spec.layer_sizes == (51, 25)
        assert "V=357" in spec.describe_chain()

    def test_unknown_keys_rejected(self):
        cfg = {
            "obs_dim": 10,
            "layers": [{"filter": 2, "stride": 2, "fixed_shape": 0.3}],
            "top_prior": {"shape": 0.1, "rate": 0.1},
            "weight_prior": {"shape": 0.1, "rate": 0.3},
            "padding": "same",
        }
        with pytest.raises(ConfigurationError, match="padding"):
            model_spec_from_dict(cfg)

    def test_missing_key_rejected(self):
        with pytest.raises(ConfigurationError):
            model_spec_from_dict({"obs_dim": 10})
