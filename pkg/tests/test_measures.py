import itertools

import numpy as np
import pytest

from mfgclab.measures import (
    EmpiricalMeasure,
    JointEmpiricalMeasure,
    MeasureError,
    first_marginal,
    flow_distance,
    gaussian_quantile_cloud,
    load_measure_csv,
    mixture,
    moment,
    resample_quantile,
    save_measure_csv,
)


def cloud(xs, weights=None):
    xs = np.asarray(xs, dtype=float)
    return EmpiricalMeasure(xs[:, None], weights if weights is None else np.asarray(weights))


def joint(xs, sec, weights=None):
    xs = np.asarray(xs, dtype=float)
    sec = np.asarray(sec, dtype=float)
    return JointEmpiricalMeasure(xs[:, None], sec[:, None], weights)


class TestInvariants:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(MeasureError):
            EmpiricalMeasure(np.zeros((2, 1)), np.array([0.5, 0.6]))

    def test_nonfinite_points_rejected(self):
        with pytest.raises(MeasureError):
            cloud([0.0, np.inf])

    def test_negative_weights_rejected(self):
        with pytest.raises(MeasureError):
            EmpiricalMeasure(np.zeros((2, 1)), np.array([1.5, -0.5]))

    def test_empty_rejected(self):
        with pytest.raises(MeasureError):
            EmpiricalMeasure(np.zeros((0, 1)), np.zeros(0))


class TestFirstMarginal:
    def test_single_atom(self):
        j = joint([1.0], [2.0])
        m = first_marginal(j)
        assert m.n == 1 and m.x[0] == 1.0 and m.weights[0] == 1.0

    def test_coordinate_projection(self):
        j = joint([0.0, 3.0], [5.0, 7.0])
        m = first_marginal(j)
        assert np.array_equal(m.x, [0.0, 3.0])
        assert np.array_equal(m.weights, [0.5, 0.5])

    def test_pairing_roundtrip_is_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            base = cloud(rng.normal(size=6))
            paired = JointEmpiricalMeasure(base.points, rng.normal(size=(6, 1)), base.weights)
            back = first_marginal(paired)
            assert np.array_equal(back.points, base.points)
            assert np.array_equal(back.weights, base.weights)


class TestMoment:
    def test_first_moment(self):
        assert moment(cloud([1.0, 3.0]), 1) == pytest.approx(2.0)

    def test_second_moment(self):
        assert moment(cloud([1.0, 3.0]), 2) == pytest.approx(5.0)

    def test_single_atom(self):
        for c in (-2.5, 0.0, 7.0):
            assert moment(cloud([c]), 1) == pytest.approx(c)

    def test_linear_in_weights(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            a = cloud(rng.normal(size=5))
            b = cloud(rng.normal(size=4))
            w = float(rng.uniform())
            mixed = mixture(a, b, w)
            for k in (1, 2):
                expected = (1 - w) * moment(a, k) + w * moment(b, k)
                assert moment(mixed, k) == pytest.approx(expected, abs=1e-12)

    def test_rejects_bad_order(self):
        with pytest.raises(MeasureError):
            moment(cloud([1.0]), 3)


class TestFlowDistance:
    def test_identical_is_zero(self):
        a = cloud([0.3, -1.0, 2.0])
        assert flow_distance(a, a) == 0.0

    def test_translation(self):
        a = cloud(np.zeros(7))
        for c in (-1.5, 0.25, 4.0):
            assert flow_distance(a, cloud(np.full(7, c))) == pytest.approx(abs(c))

    def test_two_atom_oracle(self):
        # Enumerate both couplings of {0,1} vs {1,2}: the sorted coupling wins.
        xs = np.array([0.0, 1.0])
        ys = np.array([1.0, 2.0])
        best = min(
            np.sqrt(np.mean((xs - np.array(perm)) ** 2))
            for perm in itertools.permutations(ys)
        )
        assert best == pytest.approx(1.0)
        assert flow_distance(cloud(xs), cloud(ys)) == pytest.approx(best)

    def test_metric_properties_on_seeded_triples(self):
        rng = np.random.default_rng(2024)
        for _ in range(120):
            n = int(rng.integers(2, 9))
            a = cloud(rng.normal(size=n))
            b = cloud(rng.normal(size=n))
            c = cloud(rng.normal(size=n))
            dab = flow_distance(a, b)
            dba = flow_distance(b, a)
            assert dab == dba
            assert dab >= 0.0
            assert flow_distance(a, b) <= flow_distance(a, c) + flow_distance(c, b) + 1e-12

    def test_zero_iff_sorted_supports_match(self):
        a = cloud([0.0, 1.0, 2.0])
        b = cloud([2.0, 0.0, 1.0])
        assert flow_distance(a, b) == 0.0
        assert flow_distance(a, cloud([0.0, 1.0, 2.5])) > 0.0

    def test_rejects_unequal_or_weighted(self):
        with pytest.raises(MeasureError):
            flow_distance(cloud([0.0]), cloud([0.0, 1.0]))
        with pytest.raises(MeasureError):
            flow_distance(cloud([0.0, 1.0], [0.3, 0.7]), cloud([0.0, 1.0]))


class TestMixtureResample:
    def test_mixture_weights(self):
        mixed = mixture(cloud([0.0, 1.0]), cloud([5.0]), 0.25)
        assert mixed.n == 3
        assert mixed.weights.sum() == pytest.approx(1.0)
        assert np.allclose(mixed.weights, [0.375, 0.375, 0.25])

    def test_joint_mixture(self):
        mixed = mixture(joint([0.0], [1.0]), joint([2.0], [3.0]), 0.5)
        assert mixed.n == 2
        assert np.allclose(mixed.seconds[:, 0], [1.0, 3.0])

    def test_mixing_kinds_rejected(self):
        with pytest.raises(MeasureError):
            mixture(cloud([0.0]), joint([0.0], [0.0]), 0.5)

    def test_resample_uniform_cloud_is_identity_on_sorted_support(self):
        a = cloud([3.0, -1.0, 0.5, 2.0])
        r = resample_quantile(a, 4)
        assert np.allclose(np.sort(a.x), r.x)
        assert r.is_uniform()

    def test_resample_respects_weights(self):
        # 3/4 of the mass at 0, 1/4 at 10: three of four quantile atoms at 0.
        a = cloud([0.0, 10.0], [0.75, 0.25])
        r = resample_quantile(a, 4)
        assert np.allclose(r.x, [0.0, 0.0, 0.0, 10.0])


class TestCsv:
    def test_roundtrip_plain(self, tmp_path):
        a = cloud([0.5, -2.0, 1.25], [0.2, 0.3, 0.5])
        path = tmp_path / "cloud.csv"
        save_measure_csv(path, a)
        header = path.read_text().splitlines()[0]
        assert header == "x_0,weight"
        back = load_measure_csv(path)
        assert isinstance(back, EmpiricalMeasure)
        assert np.array_equal(back.points, a.points)
        assert np.array_equal(back.weights, a.weights)

    def test_roundtrip_joint(self, tmp_path):
        j = joint([0.0, 1.0], [2.0, -3.0])
        path = tmp_path / "joint.csv"
        save_measure_csv(path, j)
        assert path.read_text().splitlines()[0] == "x_0,a_0,weight"
        back = load_measure_csv(path)
        assert isinstance(back, JointEmpiricalMeasure)
        assert np.array_equal(back.seconds, j.seconds)


class TestQuantileClouds:
    def test_gaussian_cloud_moments(self):
        g = gaussian_quantile_cloud(4096, mean=1.5, sd=2.0)
        assert g.mean() == pytest.approx(1.5, abs=1e-12)
        assert moment(g, 2) - g.mean() ** 2 == pytest.approx(4.0, rel=5e-3)

    def test_gaussian_cloud_symmetric(self):
        g = gaussian_quantile_cloud(16)
        assert np.allclose(np.sort(g.x) + np.sort(g.x)[::-1], 0.0, atol=1e-12)
