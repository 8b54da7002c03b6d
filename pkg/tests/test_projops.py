"""Unit tests for the projection operators.

Worked examples are frozen from independent oracles (dense grids over the
constraint sets, bisection on scalar reductions); property tests draw seeded
random inputs and check idempotence and membership of the output in the
constraint set.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from projnet import projops as P

import oracles


def dist2(*pairs):
    return sum(float(np.sum((np.asarray(a) - np.asarray(b)) ** 2)) for a, b in pairs)


class TestIdentity:
    def test_average(self):
        assert P.proj_identity(np.array(1.0), np.array(3.0)) == (2.0, 2.0)
        assert P.proj_identity(np.array(0.0), np.array(4.0)) == (2.0, 2.0)

    def test_fixed_point_exact(self):
        for a in (0.1, -2.75, 1e8):
            x, y = P.proj_identity(np.array(a), np.array(a))
            assert x == a and y == a

    @given(st.floats(-50, 50), st.floats(-50, 50))
    @settings(max_examples=200, deadline=None)
    def test_on_line_and_idempotent(self, x0, y0):
        x, y = P.proj_identity(np.array(x0), np.array(y0))
        assert x == y
        x2, y2 = P.proj_identity(x, y)
        assert abs(x2 - x) <= 1e-9 and abs(y2 - y) <= 1e-9


class TestSum:
    def test_already_on_hyperplane(self):
        x, y = P.proj_sum(np.array([1.0, 2.0]), np.array(3.0))
        np.testing.assert_array_equal(x, [1.0, 2.0])
        assert y == 3.0

    def test_worked_examples(self):
        x, y = P.proj_sum(np.array([1.0, 1.0]), np.array(5.0))
        np.testing.assert_allclose(x, [2.0, 2.0], atol=1e-12)
        assert abs(y - 4.0) <= 1e-12
        x, y = P.proj_sum(np.array([0.0]), np.array(2.0))
        np.testing.assert_allclose(x, [1.0], atol=1e-12)
        assert abs(y - 1.0) <= 1e-12

    def test_grid_optimality_of_examples(self):
        d_impl = dist2(([2.0, 2.0], [1.0, 1.0]), (4.0, 5.0))
        assert abs(d_impl - oracles.oracle_sum2(np.array([1.0, 1.0]), 5.0)) <= 1e-3
        d_impl = dist2(([1.0], [0.0]), (1.0, 2.0))
        assert abs(d_impl - oracles.oracle_sum1(0.0, 2.0)) <= 1e-3

    def test_feasibility_and_idempotence(self):
        rng = np.random.default_rng(7)
        for n in (1, 2, 5):
            x0 = rng.normal(size=(300, n)) * 3
            y0 = rng.normal(size=300) * 3
            x, y = P.proj_sum(np.moveaxis(x0, -1, 0), y0)
            np.testing.assert_allclose(x.sum(axis=0), y, atol=1e-9)
            x2, y2 = P.proj_sum(x, y)
            assert np.max(np.abs(x2 - x)) <= 1e-9
            assert np.max(np.abs(y2 - y)) <= 1e-9

    def test_nonexpansive(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(200, 4)) * 5
        b = rng.normal(size=(200, 4)) * 5
        xa, ya = P.proj_sum(np.moveaxis(a[:, :3], -1, 0), a[:, 3])
        xb, yb = P.proj_sum(np.moveaxis(b[:, :3], -1, 0), b[:, 3])
        da = np.sum((xa - xb) ** 2, axis=0) + (ya - yb) ** 2
        db = np.sum((a[:, :3] - b[:, :3]) ** 2, axis=1) + (a[:, 3] - b[:, 3]) ** 2
        assert np.all(da <= db + 1e-12)


class TestSumReLU:
    def test_flat_region_untouched(self):
        x, y = P.proj_sum_relu(np.array([-2.0, -1.0]), np.array(0.0))
        np.testing.assert_array_equal(x, [-2.0, -1.0])
        assert y == 0.0

    def test_sloped_branch_wins(self):
        # candidate distances: sloped 3 vs flat 27
        x, y = P.proj_sum_relu(np.array([1.0, 1.0]), np.array(5.0))
        np.testing.assert_allclose(x, [2.0, 2.0], atol=1e-12)
        assert abs(y - 4.0) <= 1e-12
        assert abs(dist2(([2.0, 2.0], [1.0, 1.0]), (4.0, 5.0)) - 3.0) <= 1e-12

    def test_flat_branch_wins(self):
        # candidate distances: flat 1 vs sloped 3
        x, y = P.proj_sum_relu(np.array([-1.0, -1.0]), np.array(1.0))
        np.testing.assert_array_equal(x, [-1.0, -1.0])
        assert y == 0.0

    def test_examples_match_grid(self):
        assert abs(3.0 - oracles.oracle_sum_relu2(np.array([1.0, 1.0]), 5.0)) <= 1e-3
        assert abs(1.0 - oracles.oracle_sum_relu2(np.array([-1.0, -1.0]), 1.0)) <= 1e-3

    def test_tie_breaks_to_sloped(self):
        # at (x0, y0) = (0, 0) both pieces contain the point; stay put
        x, y = P.proj_sum_relu(np.array([0.0]), np.array(0.0))
        assert x[0] == 0.0 and y == 0.0

    def test_feasibility_and_idempotence(self):
        rng = np.random.default_rng(5)
        for n in (1, 2, 4):
            x0 = rng.normal(size=(400, n)) * 3
            y0 = rng.normal(size=400) * 3
            x, y = P.proj_sum_relu(np.moveaxis(x0, -1, 0), y0)
            np.testing.assert_allclose(np.maximum(x.sum(axis=0), 0.0), y, atol=1e-9)
            x2, y2 = P.proj_sum_relu(x, y)
            assert np.max(np.abs(x2 - x)) <= 1e-9
            assert np.max(np.abs(y2 - y)) <= 1e-9


class TestDot:
    def test_already_on_graph(self):
        x, y, z = P.proj_dot(np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array(0.0))
        np.testing.assert_array_equal(x, [1.0, 0.0])
        np.testing.assert_array_equal(y, [0.0, 1.0])
        assert z == 0.0

    def test_scalar_example_newton_root(self):
        # f(t) = 4t/(1-t^2)^2 + t - 1 has its root regenerated by bisection
        root = oracles.bisect_root(
            lambda t: 4 * t / (1 - t * t) ** 2 + t - 1, 0.0, 0.5
        )
        assert round(root, 5) == 0.18866
        x, y, z = P.proj_dot(np.array([2.0]), np.array([0.0]), np.array(1.0))
        np.testing.assert_allclose(x, [2.0 / (1 - root**2)], atol=1e-4)
        np.testing.assert_allclose(y, [2.0 * root / (1 - root**2)], atol=1e-4)
        assert abs(z - (1.0 - root)) <= 1e-4
        # and the distance agrees with the exhaustive grid
        d_impl = dist2((x, [2.0]), (y, [0.0]), (z, 1.0))
        assert abs(d_impl - oracles.oracle_dot([2.0], [0.0], 1.0)) <= 1e-3

    def test_symmetric_cubic_example(self):
        # stationarity on the diagonal reduces to t^3 - 2t - 1 = 0, root phi
        roots = np.roots([1.0, 0.0, -2.0, -1.0])
        phi = float(max(roots.real))
        assert abs(phi - (1 + np.sqrt(5)) / 2) <= 1e-12
        x, y, z = P.proj_dot(np.array([1.0]), np.array([1.0]), np.array(3.0))
        np.testing.assert_allclose(x, [phi], atol=1e-4)
        np.testing.assert_allclose(y, [phi], atol=1e-4)
        assert abs(z - phi**2) <= 1e-4

    def test_feasibility_and_idempotence(self):
        rng = np.random.default_rng(3)
        for n in (1, 2, 8):
            x0 = rng.normal(size=(500, n)) * 2
            y0 = rng.normal(size=(500, n)) * 2
            z0 = rng.normal(size=500) * 4
            x, y, z = P.proj_dot(x0, y0, z0)
            q = (x0**2).sum(-1) + (y0**2).sum(-1)
            resid = np.abs(np.einsum("ij,ij->i", x, y) - z)
            assert np.all(resid <= 1e-6 * np.maximum(1.0, q))
            x2, y2, z2 = P.proj_dot(x, y, z)
            drift = max(
                np.max(np.abs(x2 - x)), np.max(np.abs(y2 - y)), np.max(np.abs(z2 - z))
            )
            assert drift <= 1e-6

    def test_degenerate_oppositely_equal_operands(self):
        # x0 = -y0 sits outside the uniqueness regime and the rescaling family
        # cannot represent the true projection; the operator must stay total,
        # finite, and deterministic (perturb-once-and-retry policy)
        args = (np.array([1.0]), np.array([-1.0]), np.array(3.0))
        x, y, z = P.proj_dot(*args)
        assert np.isfinite(x).all() and np.isfinite(y).all() and np.isfinite(z)
        x2, y2, z2 = P.proj_dot(*args)
        assert np.array_equal(x, x2) and np.array_equal(y, y2) and z == z2

    def test_near_degenerate_still_projects(self):
        # a relative offset of 1e-6 is already far enough from the singular set
        x0 = np.array([1.0 + 1e-6])
        x, y, z = P.proj_dot(x0, np.array([-1.0]), np.array(3.0))
        q = float(x0 @ x0 + 1.0)
        assert abs(float(x @ y) - z) <= 1e-6 * max(1.0, q)

    def test_vanished_operand_far_output(self):
        # zero input vector with a distant output estimate: the Newton solve
        # must not stick to the pole
        x, y, z = P.proj_dot(np.zeros((1, 16)), np.full((1, 16), 0.13), np.array([1.63]))
        assert np.abs(x).max() < 10.0
        assert abs(float(x[0] @ y[0]) - z[0]) <= 1e-6


class TestMax:
    def test_on_graph(self):
        x, y = P.proj_max(np.array([0.0, 1.0]), np.array(1.0))
        np.testing.assert_array_equal(x, [0.0, 1.0])
        assert y == 1.0

    def test_raise_top_coordinate(self):
        x, y = P.proj_max(np.array([0.0, 1.0]), np.array(3.0))
        np.testing.assert_allclose(x, [0.0, 2.0], atol=1e-12)
        assert abs(y - 2.0) <= 1e-12
        d = dist2(([0.0, 2.0], [0.0, 1.0]), (2.0, 3.0))
        assert abs(d - oracles.oracle_max2(np.array([0.0, 1.0]), 3.0)) <= 1e-3

    def test_candidates_coincide(self):
        x, y = P.proj_max(np.array([2.0, 1.0]), np.array(0.0))
        np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-12)
        assert abs(y - 1.0) <= 1e-12
        d = dist2(([1.0, 1.0], [2.0, 1.0]), (1.0, 0.0))
        assert abs(d - oracles.oracle_max2(np.array([2.0, 1.0]), 0.0)) <= 1e-3

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(9)
        x0 = rng.normal(size=(100, 5))
        y0 = rng.normal(size=100)
        x, y = P.proj_max(x0, y0)
        perm = rng.permutation(5)
        xp, yp = P.proj_max(x0[:, perm], y0)
        np.testing.assert_allclose(xp, x[:, perm], atol=1e-12)
        np.testing.assert_allclose(yp, y, atol=1e-12)

    def test_feasibility_and_idempotence(self):
        rng = np.random.default_rng(13)
        for n in (1, 2, 6):
            x0 = rng.normal(size=(400, n)) * 3
            y0 = rng.normal(size=400) * 3
            x, y = P.proj_max(x0, y0)
            np.testing.assert_allclose(x.max(axis=-1), y, atol=1e-9)
            x2, y2 = P.proj_max(x, y)
            assert np.max(np.abs(x2 - x)) <= 1e-9
            assert np.max(np.abs(y2 - y)) <= 1e-9


class TestQuantize:
    KIND = P.Quantize(3, 1.0)

    def test_levels(self):
        np.testing.assert_allclose(self.KIND.levels(), [-1.0, 0.0, 1.0])

    def test_on_graph_points_unchanged(self):
        x, y = P.proj_quantize(np.array(0.0), np.array(0.0), self.KIND)
        assert x == 0.0 and y == 0.0
        x, y = P.proj_quantize(np.array(-2.0), np.array(-1.0), self.KIND)
        assert x == -2.0 and y == -1.0

    def test_candidate_enumeration_example(self):
        # candidate distances for (0.6, 0.9): 4.82 / 0.82 / 0.01
        x0, y0 = 0.6, 0.9
        levels = self.KIND.levels()
        cands = [(-0.5, -1.0), (0.5, 0.0), (0.6, 1.0)]
        dists = [dist2((cx, x0), (cy, y0)) for cx, cy in cands]
        np.testing.assert_allclose(dists, [4.82, 0.82, 0.01], atol=1e-12)
        x, y = P.proj_quantize(np.array(x0), np.array(y0), self.KIND)
        assert (float(x), float(y)) == (0.6, 1.0)
        d = dist2((x, x0), (y, y0))
        assert abs(d - oracles.oracle_quantize(x0, y0, levels)) <= 1e-3

    def test_tie_breaks_to_lower_level(self):
        # equidistant between (x=-0.5,y=-1) and (x=-0.5,y=0); lower level wins
        x, y = P.proj_quantize(np.array(-0.5), np.array(-0.5), self.KIND)
        assert y == -1.0

    def test_membership_and_idempotence(self):
        rng = np.random.default_rng(21)
        for k, alpha in ((2, 1.0), (3, 1.0), (7, 2.5)):
            kind = P.Quantize(k, alpha)
            x0 = rng.normal(size=500) * 3
            y0 = rng.normal(size=500) * 3
            x, y = P.proj_quantize(x0, y0, kind)
            fwd = P.forward_primitive(kind, [x])
            np.testing.assert_array_equal(fwd, y)
            x2, y2 = P.proj_quantize(x, y, kind)
            assert np.max(np.abs(x2 - x)) == 0.0
            assert np.max(np.abs(y2 - y)) == 0.0


class TestMargin:
    def test_examples(self):
        assert P.proj_margin(np.array(-0.5), np.array(False), 1.0) == -0.5
        assert P.proj_margin(np.array(0.3), np.array(True), 1.0) == 1.0
        assert P.proj_margin(np.array(2.0), np.array(False), 1.0) == 0.0

    @given(st.floats(-20, 20), st.booleans(), st.floats(0.1, 5))
    @settings(max_examples=300, deadline=None)
    def test_membership_and_idempotence(self, x0, pos, m):
        x = P.proj_margin(np.array(x0), np.array(pos), m)
        assert (x >= m) if pos else (x <= 0.0)
        x2 = P.proj_margin(x, np.array(pos), m)
        assert x2 == x

    def test_grid_agreement(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            x0 = float(rng.normal() * 3)
            pos = bool(rng.integers(2))
            x = float(P.proj_margin(np.array(x0), np.array(pos), 1.0))
            assert abs((x - x0) ** 2 - oracles.oracle_margin(x0, pos, 1.0)) <= 1e-3


class TestCrossEntropyProx:
    def test_tiny_lambda_is_identity(self):
        x0 = np.array([0.4, -1.2, 2.0])
        y = np.array([0.0, 1.0, 0.0])
        x = P.prox_cross_entropy(x0, y, 1e-9)
        np.testing.assert_allclose(x, x0, atol=1e-8)

    def test_symmetric_two_class_example(self):
        # reduction to a = 1 - sigmoid(2a), regenerated by bisection
        root = oracles.bisect_root(
            lambda a: a - 1.0 + 1.0 / (1.0 + np.exp(-2 * a)), 0.0, 1.0
        )
        x = P.prox_cross_entropy(np.zeros(2), np.array([1.0, 0.0]), 1.0)
        np.testing.assert_allclose(x, [root, -root], atol=1e-4)
        # and full minimization of the prox objective agrees
        d = oracles.oracle_ce_prox(np.zeros(2), np.array([1.0, 0.0]), 1.0)
        val = 1.0 * P.cross_entropy_loss(x, np.array([1.0, 0.0])) + 0.5 * np.sum(x**2)
        assert abs(val - d) <= 1e-3

    def test_matched_softmax_is_fixed_point(self):
        # softmax(x0) = y is unreachable exactly, but a near-match must barely move
        x0 = np.array([40.0, 0.0, 0.0])
        y = np.array([1.0, 0.0, 0.0])
        x = P.prox_cross_entropy(x0, y, 5.0)
        np.testing.assert_allclose(x, x0, atol=1e-8)

    def test_fixed_point_residual_random(self):
        rng = np.random.default_rng(17)
        for d in (2, 5, 10):
            for lam in (0.5, 2.0, 5.0):
                x0 = rng.normal(size=(200, d)) * 3
                labels = rng.integers(0, d, size=200)
                y = np.zeros((200, d))
                y[np.arange(200), labels] = 1.0
                x = P.prox_cross_entropy(x0, y, lam)
                resid = P.cross_entropy_prox_residual(x, x0, y, lam)
                assert resid.max() <= 1e-6


class TestConsensus:
    def test_identity_base_unweighted(self):
        x, reps = P.proj_consensus(
            P.proj_identity, np.array(1.0), [np.array(3.0), np.array(5.0)]
        )
        assert float(x) == 2.5
        assert [float(r) for r in reps] == [2.5, 2.5]

    def test_identity_base_weighted(self):
        x, reps = P.proj_consensus(
            P.proj_identity, np.array(1.0), [np.array(3.0), np.array(5.0)],
            weighted=True,
        )
        assert float(x) == 3.0
        assert [float(r) for r in reps] == [3.0, 3.0]

    def test_single_output_reduces_to_base(self):
        x, reps = P.proj_consensus(P.proj_identity, np.array(1.0), [np.array(3.0)])
        xb, yb = P.proj_identity(np.array(1.0), np.array(3.0))
        assert float(x) == float(xb) and float(reps[0]) == float(yb)

    def test_fixed_point_untouched(self):
        x, reps = P.proj_consensus(
            P.proj_identity, np.array(2.0), [np.array(2.0), np.array(2.0)]
        )
        assert float(x) == 2.0 and all(float(r) == 2.0 for r in reps)

    def test_replicas_bitwise_equal(self):
        rng = np.random.default_rng(23)
        x0 = rng.normal(size=(4,))
        youts = [rng.normal(size=(4,)) for _ in range(5)]
        _, reps = P.proj_consensus(P.proj_identity, x0, youts)
        for r in reps[1:]:
            assert np.array_equal(r, reps[0])

    def test_weighted_matches_replicated_grid(self):
        # weighted consensus = exact projection of the fanned-out point
        rng = np.random.default_rng(31)
        t = oracles._dense_axis()
        for _ in range(25):
            x0 = float(rng.normal() * 2)
            youts = [np.array(float(rng.normal() * 2)) for _ in range(3)]
            x, reps = P.proj_consensus(P.proj_identity, np.array(x0), youts, weighted=True)
            d_impl = (float(x) - x0) ** 2 + sum(
                (float(r) - float(yo)) ** 2 for r, yo in zip(reps, youts)
            )
            d_grid = np.min(
                (t - x0) ** 2 + sum((t - float(yo)) ** 2 for yo in youts)
            )
            assert abs(d_impl - d_grid) <= 1e-3


class TestWeightedVariants:
    """out_weight scales the output-side penalty in every base operator."""

    def test_weighted_sum_stationarity(self):
        rng = np.random.default_rng(41)
        for w in (2.0, 5.0):
            x0 = rng.normal(size=(3,))
            y0 = float(rng.normal())
            x, y = P.proj_sum(x0, np.array(y0), out_weight=w)
            # on the hyperplane, and the weighted gradient vanishes
            assert abs(x.sum() - y) <= 1e-9
            grad_x = 2 * (x - x0)
            grad_y = 2 * w * (y - y0)
            # x - x0 is parallel to the all-ones normal; y multiplier matches
            np.testing.assert_allclose(grad_x, grad_x[0], atol=1e-9)
            assert abs(grad_x[0] + grad_y) <= 1e-9

    def test_weighted_dot_feasible(self):
        rng = np.random.default_rng(43)
        x0 = rng.normal(size=(50, 3))
        y0 = rng.normal(size=(50, 3))
        z0 = rng.normal(size=50) * 3
        x, y, z = P.proj_dot(x0, y0, z0, out_weight=4.0)
        q = (x0**2).sum(-1) + (y0**2).sum(-1)
        resid = np.abs(np.einsum("ij,ij->i", x, y) - z)
        assert np.all(resid <= 1e-6 * np.maximum(1.0, q))


class TestOracleMinimality:
    """Squared distances match the grid oracles on scalar-width instances."""

    N_CASES = 25  # the acceptance suite runs the full population

    def test_all_operators(self):
        rng = np.random.default_rng(101)
        kind = P.Quantize(3, 1.0)
        levels = kind.levels()
        for _ in range(self.N_CASES):
            x0 = float(rng.normal() * 2.5)
            y0 = float(rng.normal() * 2.5)
            x2 = rng.normal(size=2) * 2.5

            xi, yi = P.proj_identity(np.array(x0), np.array(y0))
            assert abs(dist2((xi, x0), (yi, y0)) - oracles.oracle_identity(x0, y0)) <= 1e-3

            xs, ys = P.proj_sum(np.array([x0]), np.array(y0))
            assert abs(dist2((xs, [x0]), (ys, y0)) - oracles.oracle_sum1(x0, y0)) <= 1e-3

            xs, ys = P.proj_sum(x2.copy(), np.array(y0))
            assert abs(dist2((xs, x2), (ys, y0)) - oracles.oracle_sum2(x2, y0)) <= 1e-3

            xr, yr = P.proj_sum_relu(np.array([x0]), np.array(y0))
            assert abs(dist2((xr, [x0]), (yr, y0)) - oracles.oracle_sum_relu1(x0, y0)) <= 1e-3

            xr, yr = P.proj_sum_relu(x2.copy(), np.array(y0))
            assert abs(dist2((xr, x2), (yr, y0)) - oracles.oracle_sum_relu2(x2, y0)) <= 1e-3

            xm, ym = P.proj_max(x2.copy(), np.array(y0))
            assert abs(dist2((xm, x2), (ym, y0)) - oracles.oracle_max2(x2, y0)) <= 1e-3

            xq, yq = P.proj_quantize(np.array(x0), np.array(y0), kind)
            assert abs(dist2((xq, x0), (yq, y0)) - oracles.oracle_quantize(x0, y0, levels)) <= 1e-3

            xd, yd, zd = P.proj_dot(np.array([x0]), np.array([y0]), np.array(2 * x0 * y0 + 0.3))
            z0 = 2 * x0 * y0 + 0.3
            assert (
                abs(dist2((xd, [x0]), (yd, [y0]), (zd, z0)) - oracles.oracle_dot([x0], [y0], z0))
                <= 1e-3
            )
