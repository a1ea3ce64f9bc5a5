import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fisherform.metrics import (
    FisherSettings,
    MetricKind,
    ensemble_entropy,
    entropy,
    error_probability,
    fisher_direction,
    fisher_form,
    fisher_form_along,
    fisher_form_batch,
    fisher_form_fd,
    kl_divergence,
    mc_dropout_entropy,
    score_batch,
)
from fisherform.netcore import (
    DropoutConfig,
    NetworkSpec,
    ShapeError,
    entropy_gradient,
    forward,
    forward_dropout,
)

from conftest import random_net

RAW = FisherSettings(direction_normalization="raw")

prob_vectors = st.lists(st.floats(0.0, 1.0), min_size=2, max_size=12).filter(lambda v: sum(v) > 1e-3).map(
    lambda v: np.asarray(v) / np.sum(v)
)


def logistic_net(theta=0.0):
    """1 -> 2 net whose only free coordinate is the class-1 weight."""
    return NetworkSpec.from_widths([1, 2]), np.array([0.0, theta, 0.0, 0.0])


class TestSimpleScores:
    def test_error_probability(self):
        assert error_probability(np.array([0.988, 0.012])) == pytest.approx(0.012)
        assert error_probability(np.full(4, 0.25)) == pytest.approx(0.75)
        assert error_probability(np.eye(3)[1]) == 0.0

    def test_entropy_examples(self):
        assert entropy(np.full(10, 0.1)) == pytest.approx(np.log(10))
        assert entropy(np.array([1.0, 0.0, 0.0])) == 0.0
        assert entropy(np.array([0.5, 0.5])) == pytest.approx(np.log(2))

    def test_rowwise(self):
        P = np.array([[0.5, 0.5], [1.0, 0.0]])
        np.testing.assert_allclose(entropy(P), [np.log(2), 0.0])
        np.testing.assert_allclose(error_probability(P), [0.5, 0.0])

    @given(prob_vectors)
    def test_entropy_bounds(self, p):
        h = entropy(p)
        assert -1e-12 <= h <= np.log(p.size) + 1e-9
        assert 0.0 <= error_probability(p) <= 1.0 - 1.0 / p.size + 1e-12

    @given(prob_vectors, prob_vectors)
    def test_kl_nonnegative(self, p, q):
        if p.size != q.size:
            return
        assert kl_divergence(p, q) >= -1e-9
        assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-12)

    def test_kl_example(self):
        p, q = np.array([0.5, 0.5]), np.array([0.25, 0.75])
        assert kl_divergence(p, q) == pytest.approx(0.5 * np.log(2) + 0.5 * np.log(0.5 / 0.75))


class TestFisherDirection:
    def test_uniform_output_is_zero(self):
        spec, params = logistic_net(0.0)
        d = fisher_direction(spec, params, np.array([1.0]))
        assert d.is_zero
        np.testing.assert_array_equal(d.vector, 0.0)
        assert fisher_form(spec, params, np.array([1.0])) == 0.0
        assert fisher_form_fd(spec, params, np.array([1.0])) == 0.0

    def test_unit_norm_and_raw(self, small_net, rng):
        spec, params = small_net
        x = rng.normal(size=5)
        unit = fisher_direction(spec, params, x)
        raw = fisher_direction(spec, params, x, RAW)
        assert np.linalg.norm(unit.vector) == pytest.approx(1.0)
        np.testing.assert_allclose(raw.vector, -entropy_gradient(spec, params, x))
        np.testing.assert_allclose(unit.vector * np.linalg.norm(raw.vector), raw.vector)

    def test_direction_lowers_entropy(self):
        # stepping along v sharpens an already-leaning prediction
        spec, params = logistic_net(0.7)
        x = np.array([1.0])
        v = fisher_direction(spec, params, x).vector
        assert v[1] > 0
        assert entropy(forward(spec, params + 1e-3 * v, x)) < entropy(forward(spec, params, x))

    def test_invalid_settings(self):
        with pytest.raises(ValueError):
            FisherSettings(direction_normalization="l1")
        with pytest.raises(ValueError):
            FisherSettings(fd_step=0.0)


class TestFisherForm:
    def test_logistic_closed_form(self):
        # p1 = sigmoid(theta x): dp1/dtheta = p(1-p) x = 1/4 at theta=0, x=1,
        # so F = 2 * (1/4)^2 / (1/2) = 1/4
        spec, params = logistic_net(0.0)
        v = np.array([0.0, 1.0, 0.0, 0.0])
        assert fisher_form_along(spec, params, np.array([1.0]), v) == pytest.approx(0.25, abs=1e-12)

    def test_logistic_closed_form_general(self):
        spec, _ = logistic_net()
        v = np.array([0.0, 1.0, 0.0, 0.0])
        for theta, x in [(0.3, 1.0), (-1.2, 0.5), (2.0, -2.0)]:
            p = 1.0 / (1.0 + np.exp(-theta * x))
            expected = (p * (1 - p) * x) ** 2 * (1 / p + 1 / (1 - p))
            got = fisher_form_along(spec, np.array([0.0, theta, 0.0, 0.0]), np.array([x]), v)
            assert got == pytest.approx(expected, rel=1e-12)

    def test_matches_finite_differences(self, rng):
        for _ in range(10):
            spec, params = random_net(rng, [4, 9, 3])
            x = rng.normal(size=4)
            assert fisher_form(spec, params, x) == pytest.approx(fisher_form_fd(spec, params, x), rel=1e-4)

    def test_raw_scales_quadratically(self, small_net, rng):
        spec, params = small_net
        x = rng.normal(size=5)
        v = fisher_direction(spec, params, x, RAW).vector
        base = fisher_form_along(spec, params, x, v)
        for c in (0.5, 3.0, -2.0):
            assert fisher_form_along(spec, params, x, c * v) == pytest.approx(c * c * base, rel=1e-10)
        norm = np.linalg.norm(v)
        assert fisher_form(spec, params, x, RAW) == pytest.approx(base, rel=1e-12)
        assert fisher_form(spec, params, x) == pytest.approx(base / norm**2, rel=1e-10)

    @pytest.mark.parametrize("widths", [[3, 2], [5, 7, 6, 4], [4, 8, 8, 8, 3]])
    @pytest.mark.parametrize("mode", ["unit_norm", "raw"])
    def test_batch_matches_single(self, rng, widths, mode):
        spec, params = random_net(rng, widths)
        X = rng.normal(size=(25, widths[0]))
        cfg = FisherSettings(direction_normalization=mode)
        single = [fisher_form(spec, params, x, cfg) for x in X]
        np.testing.assert_allclose(fisher_form_batch(spec, params, X, cfg), single, rtol=1e-10, atol=1e-300)

    def test_batch_zero_direction(self):
        spec, params = logistic_net(0.0)
        np.testing.assert_array_equal(fisher_form_batch(spec, params, np.ones((3, 1))), 0.0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        spec, params = random_net(rng, [3, 6, 4], scale=2.0)
        X = rng.normal(size=(8, 3)) * 3
        assert np.all(fisher_form_batch(spec, params, X) >= 0.0)

    def test_along_rejects_batch(self, small_net):
        spec, params = small_net
        with pytest.raises(ShapeError):
            fisher_form_along(spec, params, np.zeros((2, 5)), np.zeros(spec.param_count))


class TestMcDropout:
    def test_rate_zero_equals_entropy(self, small_net, rng):
        spec, params = small_net
        X = rng.normal(size=(6, 5))
        cfg = DropoutConfig("bernoulli", 0.0, seed=3)
        np.testing.assert_allclose(mc_dropout_entropy(spec, params, X, cfg, passes=4), entropy(forward(spec, params, X)))

    def test_deterministic(self, small_net, rng):
        spec, params = small_net
        x = rng.normal(size=5)
        cfg = DropoutConfig("bernoulli", 0.5, seed=11)
        assert mc_dropout_entropy(spec, params, x, cfg, 16) == mc_dropout_entropy(spec, params, x, cfg, 16)

    def test_batch_rows_match_single(self, small_net, rng):
        spec, params = small_net
        X = rng.normal(size=(4, 5))
        cfg = DropoutConfig("gaussian", 0.3, seed=2)
        batch = mc_dropout_entropy(spec, params, X, cfg, 8)
        np.testing.assert_allclose(batch, [mc_dropout_entropy(spec, params, x, cfg, 8) for x in X], rtol=1e-12)

    def test_converges(self, small_net, rng):
        spec, params = small_net
        x = rng.normal(size=5)
        cfg = DropoutConfig("bernoulli", 0.5, seed=5)
        samples = np.array([entropy(forward_dropout(spec, params, x, cfg, k)) for k in range(1024)])
        se = samples.std(ddof=1) / np.sqrt(64)
        few = mc_dropout_entropy(spec, params, x, cfg, 64)
        many = mc_dropout_entropy(spec, params, x, cfg, 1024)
        assert many == pytest.approx(samples.mean(), rel=1e-12)
        assert abs(few - many) < 4 * se

    def test_passes_must_be_positive(self, small_net):
        spec, params = small_net
        with pytest.raises(ValueError):
            mc_dropout_entropy(spec, params, np.zeros(5), DropoutConfig("bernoulli", 0.5, 0), 0)


class TestEnsembleEntropy:
    def test_single_member(self, small_net, rng):
        spec, params = small_net
        X = rng.normal(size=(5, 5))
        np.testing.assert_allclose(ensemble_entropy([(spec, params)], X), entropy(forward(spec, params, X)))

    def test_identical_members(self, small_net, rng):
        spec, params = small_net
        X = rng.normal(size=(5, 5))
        np.testing.assert_allclose(ensemble_entropy([(spec, params)] * 5, X), entropy(forward(spec, params, X)))

    def test_mean_not_mixture(self):
        spec = NetworkSpec.from_widths([1, 2])
        sharp_a = np.array([0.0, 0.0, 20.0, 0.0])  # almost surely class 0
        sharp_b = np.array([0.0, 0.0, 0.0, 20.0])  # almost surely class 1
        members = [(spec, sharp_a), (spec, sharp_b)]
        x = np.array([0.0])
        assert ensemble_entropy(members, x) == pytest.approx(0.0, abs=1e-6)
        assert ensemble_entropy(members, x, mixture=True) == pytest.approx(np.log(2), abs=1e-6)

    def test_two_member_mean(self, rng):
        a = random_net(rng, [3, 4, 2])
        b = random_net(rng, [3, 2])
        x = rng.normal(size=3)
        expected = 0.5 * (entropy(forward(*a, x)) + entropy(forward(*b, x)))
        assert ensemble_entropy([a, b], x) == pytest.approx(expected)

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            ensemble_entropy([], np.zeros(3))
        with pytest.raises(ShapeError):
            ensemble_entropy([random_net(rng, [3, 2]), random_net(rng, [3, 4])], np.zeros(3))


class TestScoreBatch:
    def test_parse_list(self):
        assert MetricKind.parse_list("fisher, entropy") == [MetricKind.FISHER, MetricKind.ENTROPY]
        with pytest.raises(ValueError):
            MetricKind.parse_list("fisher,bogus")

    def test_all_metrics_match_single(self, small_net, rng):
        spec, params = small_net
        X = rng.normal(size=(7, 5))
        other = random_net(rng, [5, 4])
        dropout = DropoutConfig("bernoulli", 0.25, 1)
        single = {
            MetricKind.ERROR_PROB: lambda x: error_probability(forward(spec, params, x)),
            MetricKind.ENTROPY: lambda x: entropy(forward(spec, params, x)),
            MetricKind.FISHER: lambda x: fisher_form(spec, params, x),
            MetricKind.FISHER_FD: lambda x: fisher_form_fd(spec, params, x),
            MetricKind.MC_DROPOUT_ENTROPY: lambda x: mc_dropout_entropy(spec, params, x, dropout, 8),
            MetricKind.ENSEMBLE_ENTROPY: lambda x: ensemble_entropy([(spec, params), other], x),
        }
        for kind, fn in single.items():
            got = score_batch(kind, spec, params, X, dropout=dropout, passes=8, members=[(spec, params), other])
            np.testing.assert_allclose(got, [fn(x) for x in X], rtol=1e-10, err_msg=str(kind))

    def test_requirements(self, small_net):
        spec, params = small_net
        X = np.zeros((2, 5))
        with pytest.raises(ValueError):
            score_batch(MetricKind.MC_DROPOUT_ENTROPY, spec, params, X)
        with pytest.raises(ValueError):
            score_batch(MetricKind.ENSEMBLE_ENTROPY, spec, params, X, members=[(spec, params)])
