import math

import numpy as np
import pytest

from crossdet import autograd as ag
from crossdet.aggregation import (EmbeddingProvider, aggregate,
                                  build_support_matrix, matching_coefficient,
                                  roi_prototype)
from crossdet.autograd import Tensor, finite_difference_grad
from crossdet.data import FeatureGrid, write_feature_file


def scalar_aggregate(q, s, t):
    """Literal scalar-loop rendering of the three-step refinement."""
    hw, d = q.shape
    c1 = s.shape[0]
    a = np.zeros((hw, c1))
    for i in range(hw):
        logits = [sum(q[i, x] * s[j, x] for x in range(d)) / math.sqrt(d)
                  for j in range(c1)]
        m = max(logits)
        exps = [math.exp(v - m) for v in logits]
        z = sum(exps)
        for j in range(c1):
            a[i, j] = exps[j] / z
    out = np.zeros((hw, d))
    for i in range(hw):
        for x in range(d):
            q1 = sum(a[i, j] * (1.0 / (1.0 + math.exp(-s[j, x])))
                     for j in range(c1)) * q[i, x]
            q2 = sum(a[i, j] * t[j, x] for j in range(c1))
            out[i, x] = q1 + q2
    return a, out


class TestRoiPrototype:
    def make_grid(self, h=4, w=4, d=3, px=8, seed=0):
        rng = np.random.default_rng(seed)
        return FeatureGrid(grid=rng.normal(size=(h, w, d)), image_id=0,
                           height=h * px, width=w * px)

    def test_full_cover_is_global_mean(self):
        g = self.make_grid()
        out = roi_prototype(g, [0, 0, g.width, g.height])
        np.testing.assert_allclose(out, g.grid.reshape(-1, 3).mean(axis=0))

    def test_single_cell(self):
        g = self.make_grid()
        # cell (1, 2) spans x in [16, 24), y in [8, 16)
        out = roi_prototype(g, [16.0, 8.0, 24.0, 16.0])
        np.testing.assert_allclose(out, g.grid[1, 2])

    def test_fractional_box_matches_scalar_loop(self):
        g = self.make_grid()
        box = [2.0, 10.0, 21.0, 22.0]
        cells = []
        for r in range(4):
            for c in range(4):
                cx, cy = (c + 0.5) * 8, (r + 0.5) * 8
                if box[0] <= cx <= box[2] and box[1] <= cy <= box[3]:
                    cells.append(g.grid[r, c])
        assert len(cells) == 6          # 2 rows x 3 cols for this box
        np.testing.assert_allclose(roi_prototype(g, box),
                                   np.mean(cells, axis=0))

    def test_tiny_box_falls_back_to_center_cell(self):
        g = self.make_grid()
        out = roi_prototype(g, [17.0, 17.0, 18.0, 18.0])
        np.testing.assert_allclose(out, g.grid[2, 2])

    def test_fully_outside_rejected(self):
        g = self.make_grid()
        with pytest.raises(ValueError):
            roi_prototype(g, [100.0, 100.0, 120.0, 120.0])


class TestSupportMatrix:
    def test_elementwise_mean(self):
        v = Tensor(np.array([[1.0, 1.0]]))
        l = Tensor(np.array([[3.0, 3.0]]))
        out = build_support_matrix(v, l, "both")
        np.testing.assert_array_equal(out.data, [[2.0, 2.0]])

    def test_language_only_passthrough(self):
        l = Tensor(np.arange(6.0).reshape(2, 3))
        out = build_support_matrix(None, l, "language")
        assert out is l

    def test_vision_only_passthrough(self):
        v = Tensor(np.arange(6.0).reshape(2, 3))
        assert build_support_matrix(v, None, "vision") is v

    def test_three_class_case_matches_loop(self):
        rng = np.random.default_rng(0)
        v, l = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        out = build_support_matrix(Tensor(v), Tensor(l), "both").data
        for i in range(4):
            for j in range(5):
                assert abs(out[i, j] - (v[i, j] + l[i, j]) / 2) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            build_support_matrix(Tensor(np.ones((2, 3))),
                                 Tensor(np.ones((3, 3))), "both")

    def test_unknown_modality(self):
        with pytest.raises(ValueError):
            build_support_matrix(Tensor(np.ones((2, 3))),
                                 Tensor(np.ones((2, 3))), "audio")


class TestMatchingCoefficient:
    def test_zero_query_uniform(self):
        s = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        a = matching_coefficient(Tensor(np.zeros((5, 4))), s)
        np.testing.assert_allclose(a.data, 1 / 3, atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        a = matching_coefficient(Tensor(rng.normal(size=(6, 8))),
                                 Tensor(rng.normal(size=(4, 8))))
        np.testing.assert_allclose(a.data.sum(axis=1), 1.0, atol=1e-6)

    def test_seeded_case_matches_direct_formula(self):
        rng = np.random.default_rng(2)
        q, s = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
        a = matching_coefficient(Tensor(q), Tensor(s)).data
        ref, _ = scalar_aggregate(q, s, np.zeros_like(s))
        assert np.abs(a - ref).max() < 1e-9

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            matching_coefficient(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 5))))

    def test_orthogonal_prototype_argmax(self):
        """A query cell equal to sqrt(d) times one prototype row (rows
        orthonormal) puts its largest weight on that row."""
        d = 8
        s = np.eye(3, d)
        q = math.sqrt(d) * s[1][None, :] * 4
        a = matching_coefficient(Tensor(q), Tensor(s)).data
        assert int(np.argmax(a[0])) == 1


class TestAggregate:
    def test_zero_task_prototypes(self):
        rng = np.random.default_rng(3)
        q, s = rng.normal(size=(4, 6)), rng.normal(size=(3, 6))
        out = aggregate(Tensor(q), Tensor(s), Tensor(np.zeros((3, 6)))).data
        a, full = scalar_aggregate(q, s, np.zeros((3, 6)))
        q1 = (a @ (1 / (1 + np.exp(-s)))) * q
        assert np.abs(out - q1).max() < 1e-9
        assert np.abs(out - full).max() < 1e-9

    def test_zero_query(self):
        rng = np.random.default_rng(4)
        s, t = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
        out = aggregate(Tensor(np.zeros((5, 6))), Tensor(s), Tensor(t)).data
        np.testing.assert_allclose(out, np.tile(t.mean(axis=0), (5, 1)),
                                   atol=1e-12)

    def test_seeded_case_matches_scalar_loop(self):
        rng = np.random.default_rng(5)
        q = rng.normal(size=(4, 4))
        s = rng.normal(size=(3, 4))
        t = rng.normal(size=(3, 4))
        out = aggregate(Tensor(q), Tensor(s), Tensor(t)).data
        _, ref = scalar_aggregate(q, s, t)
        assert np.abs(out - ref).max() < 1e-9

    @pytest.mark.parametrize("seed", range(10))
    def test_random_shapes_match_scalar_loop(self, seed):
        rng = np.random.default_rng(seed)
        hw = int(rng.integers(1, 8))
        c1 = int(rng.integers(2, 6))
        d = int(rng.integers(2, 10))
        q = rng.normal(size=(hw, d))
        s = rng.normal(size=(c1, d))
        t = rng.normal(size=(c1, d))
        out = aggregate(Tensor(q), Tensor(s), Tensor(t)).data
        _, ref = scalar_aggregate(q, s, t)
        assert np.abs(out - ref).max() < 1e-9

    def test_class_permutation_invariance(self):
        rng = np.random.default_rng(6)
        q = rng.normal(size=(5, 6))
        s = rng.normal(size=(4, 6))
        t = rng.normal(size=(4, 6))
        perm = [2, 0, 1, 3]          # background row stays last
        base = aggregate(Tensor(q), Tensor(s), Tensor(t)).data
        swapped = aggregate(Tensor(q), Tensor(s[perm]), Tensor(t[perm])).data
        assert np.abs(base - swapped).max() < 1e-9

    def test_gradients_flow_to_all_inputs(self):
        rng = np.random.default_rng(7)
        q0 = rng.normal(size=(3, 4))
        s0 = rng.normal(size=(2, 4))
        t0 = rng.normal(size=(2, 4))

        for which in range(3):
            arrs = [q0, s0, t0]

            def loss_from(x):
                parts = [Tensor(a) for a in arrs]
                parts[which] = x
                return ag.sum_all(aggregate(*parts))

            t = Tensor(arrs[which], requires_grad=True)
            loss_from(t).backward()
            fd = finite_difference_grad(
                lambda a: loss_from(Tensor(a)).item(), arrs[which], 1e-5)
            denom = max(np.abs(fd).max(), 1e-12)
            assert np.abs(t.grad - fd).max() / denom < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            aggregate(Tensor(np.ones((2, 4))), Tensor(np.ones((3, 4))),
                      Tensor(np.ones((2, 4))))


class TestEmbeddingProvider:
    def test_synthetic_deterministic(self):
        a = EmbeddingProvider(d_in=8, seed=3)
        b = EmbeddingProvider(d_in=8, seed=3)
        np.testing.assert_array_equal(a.token_vector(17), b.token_vector(17))

    def test_different_seeds_differ(self):
        a = EmbeddingProvider(d_in=8, seed=3)
        b = EmbeddingProvider(d_in=8, seed=4)
        assert np.abs(a.token_vector(5) - b.token_vector(5)).max() > 1e-6

    def test_table_mode(self):
        table = np.arange(12.0).reshape(3, 4)
        p = EmbeddingProvider(d_in=4, table=table)
        np.testing.assert_array_equal(p.token_vector(2), table[2])
        np.testing.assert_array_equal(p.token_matrix([0, 2]), table[[0, 2]])

    def test_table_width_checked(self):
        with pytest.raises(ValueError):
            EmbeddingProvider(d_in=5, table=np.zeros((3, 4)))

    def test_file_round_trip(self, tmp_path):
        table = np.random.default_rng(0).normal(size=(6, 4)).astype(np.float32)
        write_feature_file(tmp_path / "emb.feat", table[:, None, :])
        p = EmbeddingProvider.from_file(tmp_path / "emb.feat")
        assert p.d_in == 4
        np.testing.assert_allclose(p.token_vector(3), table[3], atol=1e-7)
