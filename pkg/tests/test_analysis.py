import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.distance import cdist

from advreg.analysis import (
    Circle,
    EllipseFamily,
    EmpiricalDistribution,
    FieldCritic,
    Segment,
    coercivity_probe,
    constant_critic,
    critic_vs_distance,
    decay_slope,
    distance_critic,
    rotated_critic,
    segment_samples,
    wasserstein1_bruteforce,
    wasserstein1_exact,
)
from advreg.harness.theory import CIRCLE_SIGMA, circle_samples
from advreg.operators import IdentityOperator
from advreg.reconstruction import LinearRegularizer, ZeroRegularizer


def energy_test_pvalue(a, b, permutations=199, seed=0):
    """Two-sample energy-distance permutation test."""
    pooled = np.concatenate([a, b])
    d = cdist(pooled, pooled)
    n, m = len(a), len(b)
    rng = np.random.default_rng(seed)
    rows = d.sum(axis=1)

    def stat(u):
        # u marks the first sample; block means via quadratic forms
        du = d @ u
        v = 1.0 - u
        return 2 * (v @ du) / (n * m) - (u @ du) / n**2 - (v @ (rows - du)) / m**2

    base = np.concatenate([np.ones(n), np.zeros(m)])
    observed = stat(base)
    exceed = sum(stat(rng.permutation(base)) >= observed for _ in range(permutations))
    return (exceed + 1) / (permutations + 1)


@pytest.fixture(scope="module")
def circle_data():
    return circle_samples(seed=0)


class TestEmpirical:
    def test_weights(self):
        p = EmpiricalDistribution(np.zeros((4, 2)))
        np.testing.assert_allclose(p.weights, 0.25)
        assert p.weights.sum() == pytest.approx(1.0)

    def test_one_dimensional_input(self):
        assert EmpiricalDistribution([1.0, 2.0]).points.shape == (2, 1)

    def test_empty(self):
        with pytest.raises(ValueError):
            EmpiricalDistribution(np.zeros((0, 2)))

    def test_resample_seeded(self):
        p = EmpiricalDistribution(np.arange(10.0))
        np.testing.assert_array_equal(p.resample(7, 3).points, p.resample(7, 3).points)
        assert len(p.resample(7, 3)) == 7


class TestWasserstein:
    def test_identical(self, rng):
        x = rng.standard_normal((12, 2))
        assert wasserstein1_exact(x, x) == 0.0

    def test_point_masses(self):
        assert wasserstein1_exact([[0.0]], [[3.0]]) == 3.0

    def test_shift(self):
        assert wasserstein1_exact([0.0, 1.0], [1.0, 2.0]) == pytest.approx(1.0)

    @given(st.integers(1, 8), st.integers(0, 10_000))
    def test_bruteforce(self, n, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((2, n, 2))
        assert wasserstein1_exact(a, b) == pytest.approx(wasserstein1_bruteforce(a, b), rel=1e-12, abs=1e-12)

    def test_sampled_permutations_n10(self, rng):
        a, b = rng.standard_normal((2, 10, 2))
        exact = wasserstein1_exact(a, b)
        cost = cdist(a, b)
        for _ in range(2000):
            perm = rng.permutation(10)
            assert exact <= cost[np.arange(10), perm].mean() + 1e-12

    @given(st.integers(0, 10_000))
    def test_metric_axioms(self, seed):
        rng = np.random.default_rng(seed)
        p, q, r = rng.standard_normal((3, 16, 2))
        assert abs(wasserstein1_exact(p, q) - wasserstein1_exact(q, p)) < 1e-10
        assert wasserstein1_exact(p, r) <= wasserstein1_exact(p, q) + wasserstein1_exact(q, r) + 1e-10
        assert wasserstein1_exact(p, p[::-1]) < 1e-10

    def test_unequal_sizes_resampled(self):
        a = np.zeros((3, 1))
        b = np.full((5, 1), 2.0)
        assert wasserstein1_exact(a, b, seed=1) == 2.0

    def test_errors(self):
        with pytest.raises(ValueError):
            wasserstein1_exact(np.zeros((0, 2)), np.zeros((3, 2)))
        with pytest.raises(ValueError):
            wasserstein1_exact(np.zeros((2, 2)), np.zeros((2, 3)))
        with pytest.raises(ValueError):
            wasserstein1_bruteforce(np.zeros((2, 1)), np.zeros((3, 1)))

    @pytest.mark.parametrize("kind", ["distance", "linear"])
    def test_duality_inequality(self, circle_data, rng, kind):
        m, real, noisy = circle_data
        if kind == "distance":
            h = m.distance
        else:
            w = rng.standard_normal(2)
            w /= np.linalg.norm(w)
            h = lambda x: x @ w  # noqa: E731
        gap = h(noisy).mean() - h(real).mean()
        assert gap <= wasserstein1_exact(noisy, real) + 1e-8


MANIFOLDS = [Circle(1.0), Circle(2.5, (0.3, -1.0)), Segment((-1.0, 0.0), (1.0, 0.0)), Segment((0.0, 0.0), (2.0, 3.0))]


class TestManifolds:
    @pytest.mark.parametrize("m", MANIFOLDS, ids=lambda m: m.kind)
    def test_samples_on_manifold(self, m, rng):
        x = m.sample(200, rng)
        assert np.max(np.abs(m.distance(x))) < 1e-12
        np.testing.assert_allclose(m.project(x), x, atol=1e-12)

    @pytest.mark.parametrize("m", MANIFOLDS, ids=lambda m: m.kind)
    def test_projection_distance(self, m, rng):
        x = rng.uniform(-4, 4, size=(500, 2))
        d = m.distance(x)
        assert np.max(np.abs(np.linalg.norm(x - m.project(x), axis=1) - d)) < 1e-12
        assert np.all(d[np.linalg.norm(x - m.project(x), axis=1) > 1e-9] > 0)
        # projections lie on the manifold
        assert np.max(m.distance(m.project(x))) < 1e-12

    @pytest.mark.parametrize("m", MANIFOLDS, ids=lambda m: m.kind)
    def test_lipschitz_pairs(self, m, rng):
        a = rng.uniform(-4, 4, size=(10_000, 2))
        b = rng.uniform(-4, 4, size=(10_000, 2))
        assert np.all(np.abs(m.distance(a) - m.distance(b)) <= np.linalg.norm(a - b, axis=1) + 1e-12)

    @pytest.mark.parametrize("m", MANIFOLDS, ids=lambda m: m.kind)
    def test_distance_gradient(self, m, rng):
        x = rng.uniform(-4, 4, size=(50, 2))
        x = x[m.distance(x) > 0.05]
        g = m.distance_grad(x)
        h = 1e-6
        fd = np.stack([(m.distance(x + h * e) - m.distance(x - h * e)) / (2 * h) for e in np.eye(2)], axis=1)
        np.testing.assert_allclose(g, fd, atol=1e-6)

    @pytest.mark.parametrize("m", MANIFOLDS, ids=lambda m: m.kind)
    def test_perturbation_projects_back(self, m):
        # the noisy distribution pushed through the projection matches the real sampler
        noisy = m.perturb(2000, 0.3, np.random.default_rng(1))
        real = m.sample(2000, np.random.default_rng(2))
        assert energy_test_pvalue(m.project(noisy), real) > 0.01

    def test_circle_centre(self):
        m = Circle(1.0, (1.0, 2.0))
        with pytest.raises(ValueError):
            m.project(np.array([1.0, 2.0]))
        noisy = m.perturb(5000, 0.6, np.random.default_rng(0))
        assert np.min(np.linalg.norm(noisy - m.center, axis=1)) > 0

    def test_ellipse_family(self, rng):
        fam = EllipseFamily(size=16)
        x = fam.sample(5, rng)
        assert np.max(fam.distance(x)) < 0.05
        y = x + 0.1 * rng.standard_normal(x.shape)
        np.testing.assert_allclose(np.linalg.norm((y - fam.project(y)).reshape(5, -1), axis=1), fam.distance(y), rtol=1e-12)
        member = fam.image(fam.params[700])
        assert fam.distance(member) == 0.0


class TestCritics:
    def test_distance_critic(self):
        m = Circle(1.0)
        c = distance_critic(m, offset=2.0)
        x = np.array([[3.0, 0.0], [0.0, 0.5]])
        np.testing.assert_allclose(c.value(x), [4.0, 2.5])
        np.testing.assert_allclose(c.gradient(x), [[1.0, 0.0], [0.0, -1.0]])

    def test_rotated_is_unit_and_orthogonal(self, rng):
        m = Circle(1.0)
        x = rng.uniform(-2, 2, size=(100, 2))
        gr = rotated_critic(m).gradient(x)
        np.testing.assert_allclose(np.linalg.norm(gr, axis=1), 1.0)
        np.testing.assert_allclose((gr * m.distance_grad(x)).sum(axis=1), 0.0, atol=1e-12)

    def test_constant(self, rng):
        x = rng.standard_normal((4, 2))
        c = constant_critic(3.0)
        np.testing.assert_array_equal(c.value(x), 3.0)
        np.testing.assert_array_equal(c.gradient(x), 0.0)


class TestDecaySlope:
    def test_distance_critic_slope(self, circle_data):
        m, real, noisy = circle_data
        res = decay_slope(distance_critic(m), real, noisy, scale=CIRCLE_SIGMA)
        assert res.predicted == pytest.approx(-1.0)
        assert abs(res.numeric + 1.0) <= 0.1

    def test_constant_critic(self, circle_data):
        _, real, noisy = circle_data
        res = decay_slope(constant_critic(), real, noisy, scale=CIRCLE_SIGMA)
        assert res.predicted == 0.0
        assert abs(res.numeric) < 1e-12

    def test_misaligned_competitor_decays_less(self, circle_data):
        m, real, noisy = circle_data
        ana = decay_slope(distance_critic(m), real, noisy, scale=CIRCLE_SIGMA)
        rot = decay_slope(rotated_critic(m), real, noisy, scale=CIRCLE_SIGMA)
        assert rot.predicted == pytest.approx(ana.predicted)
        assert rot.numeric > ana.numeric

    def test_linear_shift_in_one_dimension(self):
        # moving every noisy point by eta toward the reals lowers W1 at unit rate
        real = np.zeros((20, 1))
        noisy = np.linspace(1, 2, 20)[:, None]
        res = decay_slope(LinearRegularizer(np.ones(1)), real, noisy, etas=(0.1, 0.2))
        assert res.numeric == pytest.approx(-1.0, abs=1e-12)

    def test_grid(self, circle_data):
        m, real, noisy = circle_data
        res = decay_slope(distance_critic(m), real, noisy, etas=(0.01, 0.02), scale=2.0)
        np.testing.assert_allclose(res.etas, [-0.04, -0.02, 0.0, 0.02, 0.04])
        assert res.distances.shape == (5,)

    @pytest.mark.parametrize("etas", [(), (0.0, 0.01), (0.01, 0.01)])
    def test_degenerate(self, circle_data, etas):
        m, real, noisy = circle_data
        with pytest.raises(ValueError):
            decay_slope(distance_critic(m), real, noisy, etas=etas)


class TestCriticVsDistance:
    def test_self(self, circle_data):
        m, _, noisy = circle_data
        rep = critic_vs_distance(distance_critic(m), m, segment_samples(m, noisy))
        assert rep.correlation == pytest.approx(1.0, abs=1e-12)
        assert rep.mean_cosine == pytest.approx(1.0, abs=1e-12)
        assert rep.n_samples == 4 * len(noisy)

    def test_offset_invariance(self, circle_data):
        m, _, noisy = circle_data
        rep = critic_vs_distance(distance_critic(m, offset=7.0), m, segment_samples(m, noisy))
        assert rep.correlation == pytest.approx(1.0, abs=1e-12)

    def test_rotated_has_zero_cosine(self, circle_data):
        m, _, noisy = circle_data
        rep = critic_vs_distance(rotated_critic(m), m, segment_samples(m, noisy))
        assert abs(rep.mean_cosine) < 1e-12

    def test_segments_between_pairs(self, circle_data):
        m, _, noisy = circle_data
        pts = segment_samples(m, noisy[:10], per_segment=3, seed=1)
        assert pts.shape == (30, 2)
        d = m.distance(pts).reshape(10, 3)
        assert np.all(d <= m.distance(noisy[:10])[:, None] + 1e-12)

    def test_too_few(self):
        m = Circle()
        with pytest.raises(ValueError):
            critic_vs_distance(distance_critic(m), m, np.ones((9, 2)))


class TestCoercivity:
    def test_zero_critic_identity(self, rng):
        y = rng.standard_normal(4)
        d = rng.standard_normal((6, 4))
        ts = np.linspace(0, 50, 501)
        rep = coercivity_probe(ZeroRegularizer(), IdentityOperator((4,)), y, d, ts, lam=1.0)
        assert rep.all_finite
        assert np.all(rep.thresholds <= np.linalg.norm(y) + ts[1])

    def test_threshold_grows_with_lambda(self, rng):
        # psi(x) = -||x|| has unit gradients pulling outward, so the minimizer along each ray moves out with lam
        psi = FieldCritic(lambda x: -np.linalg.norm(x, axis=-1), lambda x: -x / np.linalg.norm(x, axis=-1, keepdims=True))
        y = rng.standard_normal(3)
        d = rng.standard_normal((5, 3))
        ts = np.linspace(0, 400, 4001)
        prev = None
        for lam in (1.0, 10.0, 100.0, 500.0):
            rep = coercivity_probe(psi, IdentityOperator((3,)), y, d, ts, lam)
            assert rep.all_finite
            if prev is not None:
                assert np.all(rep.thresholds >= prev)
            prev = rep.thresholds
        assert np.all(prev > 200)

    def test_non_coercive_reported(self):
        # psi(x) = -2||x||^2 beats the quadratic data term
        psi = FieldCritic(lambda x: -2.0 * np.sum(x * x, axis=-1), lambda x: -4.0 * x)
        rep = coercivity_probe(psi, IdentityOperator((2,)), np.zeros(2), np.eye(2), np.linspace(0, 10, 11), lam=1.0)
        assert not rep.all_finite

    def test_bad_grid(self):
        with pytest.raises(ValueError):
            coercivity_probe(ZeroRegularizer(), IdentityOperator((2,)), np.zeros(2), np.eye(2), [0.0, 0.0, 1.0], 1.0)
