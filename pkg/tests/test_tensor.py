import numpy as np
import pytest

from bevlift import tensor as T
from bevlift.tensor import GraphConsumedError, NumericError, Tensor


def t(data, rg=True):
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=rg)


class TestArithmetic:
    def test_add_sub_mul_values(self):
        a, b = t([1.0, 2.0]), t([3.0, 5.0])
        assert np.array_equal((a + b).data, [4.0, 7.0])
        assert np.array_equal((a - b).data, [-2.0, -3.0])
        assert np.array_equal((a * b).data, [3.0, 10.0])

    def test_grad_accumulation_through_reuse(self):
        a = t([2.0])
        loss = (a * a + a).sum()   # d/da = 2a + 1 = 5
        loss.backward()
        assert a.grad == pytest.approx([5.0])

    def test_scale_add_const_pow_const(self):
        a = t([3.0])
        assert a.scale(2.0).data == pytest.approx([6.0])
        assert a.add_const(1.5).data == pytest.approx([4.5])
        assert a.pow_const(2.0).data == pytest.approx([9.0])

    def test_exp_log_roundtrip(self):
        a = t([0.5, 1.0])
        assert a.exp().log().data == pytest.approx([0.5, 1.0], abs=1e-6)

    def test_log_nonpositive_raises(self):
        with pytest.raises(NumericError):
            t([0.0]).log()

    def test_sum_mean_reshape(self):
        a = t(np.arange(6, dtype=np.float32).reshape(2, 3))
        assert a.sum().item() == 15.0
        assert a.mean().item() == pytest.approx(2.5)
        assert a.reshape(3, 2).data.shape == (3, 2)

    def test_broadcast_unbroadcast_grad(self):
        a = t(np.ones((3, 1), dtype=np.float32))
        b = t(np.ones((3, 4), dtype=np.float32))
        (a + b).sum().backward()
        assert np.array_equal(a.grad, np.full((3, 1), 4.0))
        assert np.array_equal(b.grad, np.ones((3, 4)))


class TestGraphSemantics:
    def test_backward_requires_scalar(self):
        with pytest.raises(NumericError):
            t([1.0, 2.0]).backward()

    def test_graph_consumed_once(self):
        a = t([1.0])
        loss = (a * a).sum()
        loss.backward()
        with pytest.raises(GraphConsumedError):
            loss.backward()

    def test_leaf_reusable_across_graphs(self):
        a = t([3.0])
        for _ in range(3):
            a.zero_grad()
            (a * a).sum().backward()
            assert a.grad == pytest.approx([6.0])

    def test_no_grad_into_constants(self):
        a = t([1.0], rg=False)
        b = t([2.0])
        (a * b).sum().backward()
        assert a.grad is None
        assert b.grad == pytest.approx([1.0])


class TestActivations:
    def test_relu(self):
        a = t([-1.0, 0.0, 2.0])
        y = T.relu(a)
        assert np.array_equal(y.data, [0.0, 0.0, 2.0])
        y.sum().backward()
        assert np.array_equal(a.grad, [0.0, 0.0, 1.0])

    def test_sigmoid_at_zero(self):
        assert T.sigmoid(t([0.0])).data == pytest.approx([0.5])

    def test_softplus_at_zero(self):
        assert T.softplus(t([0.0])).data == pytest.approx([np.log(2.0)])

    def test_softplus_large_input_stable(self):
        y = T.softplus(t([100.0, -100.0]))
        assert y.data[0] == pytest.approx(100.0)
        assert y.data[1] == pytest.approx(0.0, abs=1e-6)

    def test_gelu_closed_form(self):
        assert T.gelu(t([0.0])).data == pytest.approx([0.0])
        x = np.linspace(-3, 3, 13, dtype=np.float32)
        expect = 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi)
                                          * (x + 0.044715 * x ** 3)))
        assert T.gelu(t(x)).data == pytest.approx(expect, abs=1e-5)

    def test_activation_dispatch(self):
        x = t([1.0])
        assert T.activation("relu", x).data == pytest.approx(T.relu(x).data)
        with pytest.raises(ValueError):
            T.activation("tanh", x)


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = t(rng.standard_normal((3, 5, 7)).astype(np.float32))
        w = np.zeros((3, 3, 1, 1), dtype=np.float32)
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        y = T.conv2d(x, t(w), stride=1, padding=0)
        assert np.array_equal(y.data, x.data)

    def test_sum_kernel_oracle(self, rng):
        # all-ones 3x3 kernel = windowed sum; compare against scipy
        from scipy import ndimage
        x = rng.standard_normal((1, 6, 6)).astype(np.float32)
        w = np.ones((1, 1, 3, 3), dtype=np.float32)
        y = T.conv2d(t(x), t(w), stride=1, padding=1)
        expect = ndimage.correlate(x[0].astype(np.float64),
                                   np.ones((3, 3)), mode="constant")
        assert y.data[0] == pytest.approx(expect, abs=1e-4)

    def test_bias_and_stride2_shape(self, rng):
        x = t(rng.standard_normal((2, 8, 8)).astype(np.float32))
        w = t(rng.standard_normal((5, 2, 3, 3)).astype(np.float32))
        b = t(np.arange(5, dtype=np.float32))
        y = T.conv2d(x, w, b, stride=2, padding=1)
        assert y.data.shape == (5, 4, 4)
        y0 = T.conv2d(x, w, None, stride=2, padding=1)
        assert y.data == pytest.approx(y0.data + np.arange(5).reshape(-1, 1, 1),
                                       abs=1e-6)

    def test_grouped_conv_matches_blockwise(self, rng):
        x = rng.standard_normal((4, 6, 6)).astype(np.float32)
        w = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)  # 2 groups
        y = T.conv2d(t(x), t(w), stride=1, padding=1).data
        for gidx in range(2):
            sub = T.conv2d(t(x[2 * gidx:2 * gidx + 2]),
                           t(w[2 * gidx:2 * gidx + 2]), stride=1, padding=1).data
            assert y[2 * gidx:2 * gidx + 2] == pytest.approx(sub, abs=1e-6)

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(ValueError):
            T.conv2d(t(np.zeros((1, 4, 4), np.float32)),
                     t(np.zeros((1, 1, 2, 2), np.float32)))

    def test_bad_stride_rejected(self):
        with pytest.raises(ValueError):
            T.conv2d(t(np.zeros((1, 4, 4), np.float32)),
                     t(np.zeros((1, 1, 3, 3), np.float32)), stride=3)

    def test_nonfinite_raises(self):
        x = t(np.full((1, 4, 4), np.inf, dtype=np.float32))
        w = t(np.ones((1, 1, 3, 3), dtype=np.float32))
        with pytest.raises(NumericError):
            T.conv2d(x, w, stride=1, padding=1)


class TestStructuredOps:
    def test_upsample_nearest2x(self):
        x = t(np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32))
        y = T.upsample_nearest2x(x)
        assert np.array_equal(y.data[0], [[1, 1, 2, 2], [1, 1, 2, 2],
                                          [3, 3, 4, 4], [3, 3, 4, 4]])
        y.sum().backward()
        assert np.array_equal(x.grad, np.full((1, 2, 2), 4.0))

    def test_concat_slice_roundtrip(self, rng):
        a = t(rng.standard_normal((2, 3, 3)).astype(np.float32))
        b = t(rng.standard_normal((3, 3, 3)).astype(np.float32))
        cat = T.concat_channels([a, b])
        assert np.array_equal(T.slice_channels(cat, 0, 2).data, a.data)
        assert np.array_equal(T.slice_channels(cat, 2, 5).data, b.data)

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ValueError):
            T.concat_channels([t(np.zeros((1, 2, 2), np.float32)),
                               t(np.zeros((1, 3, 3), np.float32))])

    def test_softmax_weights_sum_to_one(self, rng):
        logits = [t(rng.standard_normal((1, 4, 4)).astype(np.float32))
                  for _ in range(3)]
        wts = T.softmax_over_agents(logits)
        total = sum(w.data for w in wts)
        assert total == pytest.approx(np.ones((1, 4, 4)), abs=1e-6)

    def test_softmax_single_agent_exactly_one(self, rng):
        wts = T.softmax_over_agents([t(rng.standard_normal((1, 3, 3))
                                       .astype(np.float32))])
        assert np.array_equal(wts[0].data, np.ones((1, 3, 3), dtype=np.float32))

    def test_softmax_closed_form_two_agents(self):
        a, b = t(np.full((1, 1, 1), 1.0)), t(np.full((1, 1, 1), -1.0))
        wa, wb = T.softmax_over_agents([a, b])
        expect = 1.0 / (1.0 + np.exp(-2.0))
        assert wa.data.item() == pytest.approx(expect, abs=1e-6)
        assert wb.data.item() == pytest.approx(1.0 - expect, abs=1e-6)

    def test_sum_over_agents_permutation_bit_identity(self, rng):
        xs = [rng.standard_normal((2, 4, 4)).astype(np.float32) for _ in range(5)]
        base = T.sum_over_agents([t(x) for x in xs]).data
        for _ in range(5):
            perm = rng.permutation(5)
            again = T.sum_over_agents([t(xs[i]) for i in perm]).data
            assert np.array_equal(base, again)

    def test_group_norm_statistics(self, rng):
        x = t(rng.standard_normal((4, 5, 5)).astype(np.float32) * 3 + 2)
        y = T.group_norm(x, 2, t(np.ones(4)), t(np.zeros(4)))
        for gidx in range(2):
            block = y.data[2 * gidx:2 * gidx + 2]
            assert block.mean() == pytest.approx(0.0, abs=1e-5)
            assert block.std() == pytest.approx(1.0, abs=1e-3)

    def test_group_norm_affine(self, rng):
        x = t(rng.standard_normal((2, 3, 3)).astype(np.float32))
        y0 = T.group_norm(x, 1, t(np.ones(2)), t(np.zeros(2)))
        y1 = T.group_norm(x, 1, t(np.full(2, 2.0)), t(np.full(2, 0.5)))
        assert y1.data == pytest.approx(2.0 * y0.data + 0.5, abs=1e-6)

    def test_masked_sum(self):
        x = t(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32))
        mask = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
        s = T.masked_sum(x, mask)
        assert s.item() == 5.0
        s.backward()
        assert np.array_equal(x.grad, mask)

    def test_smooth_l1_values(self):
        x = t(np.array([0.5, 2.0, -2.0], dtype=np.float32))
        y = T.smooth_l1(x)
        assert y.data == pytest.approx([0.125, 1.5, 1.5])

    def test_smooth_l1_beta(self):
        x = t(np.array([0.5], dtype=np.float32))
        assert T.smooth_l1(x, beta=2.0).data == pytest.approx([0.0625])


class TestWarp:
    def test_identity_pose_roundtrip(self, rng):
        from bevlift.scenegen import AgentPose, GridSpec, make_sampler
        grid = GridSpec(8, 8, 0.5)
        x = t(rng.standard_normal((2, 8, 8)).astype(np.float32))
        y = T.warp_bilinear(x, make_sampler(AgentPose(0, 0, 0), grid))
        assert y.data == pytest.approx(x.data, abs=1e-6)

    def test_pure_translation_by_whole_cells(self, rng):
        from bevlift.scenegen import AgentPose, GridSpec, make_sampler
        grid = GridSpec(8, 8, 0.5)
        x = rng.standard_normal((1, 8, 8)).astype(np.float32)
        # agent 2 cells to the right of ego: ego cell (i,j) samples agent (i,j-2)
        y = T.warp_bilinear(t(x), make_sampler(AgentPose(2 * 0.5, 0, 0), grid))
        assert y.data[0, :, 2:] == pytest.approx(x[0, :, :-2], abs=1e-6)
        assert y.data[0, :, :2] == pytest.approx(0.0, abs=1e-6)

    def test_out_of_grid_zero_fill(self, rng):
        from bevlift.scenegen import AgentPose, GridSpec, make_sampler
        grid = GridSpec(8, 8, 0.5)
        x = t(np.ones((1, 8, 8), dtype=np.float32))
        y = T.warp_bilinear(x, make_sampler(AgentPose(100.0, 0, 0), grid))
        assert np.array_equal(y.data, np.zeros((1, 8, 8)))

    def test_rotation_against_scipy_oracle(self, rng):
        from scipy import ndimage
        from bevlift.scenegen import AgentPose, GridSpec, make_sampler
        grid = GridSpec(16, 16, 0.5)
        pose = AgentPose(0.7, -0.4, 0.6)
        x = rng.standard_normal((1, 16, 16)).astype(np.float32)
        y = T.warp_bilinear(t(x), make_sampler(pose, grid)).data[0]
        # oracle: map each ego cell center into the agent frame, then sample
        # with scipy's bilinear interpolation over fractional indices
        cx, cy = grid.cell_centers()
        pts = np.stack([cx.ravel(), cy.ravel()], axis=1)
        pa = pose.from_ego(pts)
        fj = pa[:, 0] / grid.res + grid.w / 2.0 - 0.5
        fi = pa[:, 1] / grid.res + grid.h / 2.0 - 0.5
        expect = ndimage.map_coordinates(x[0].astype(np.float64), [fi, fj],
                                         order=1, mode="constant").reshape(16, 16)
        # the two implementations treat partially-out-of-grid cells
        # differently; compare only where all four bilinear corners are valid
        inside = ((fi >= 0) & (fi <= grid.h - 1) & (fj >= 0)
                  & (fj <= grid.w - 1)).reshape(16, 16)
        assert inside.sum() > 100
        assert y[inside] == pytest.approx(expect[inside], abs=1e-5)
