import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stgvis import autodiff as ad
from stgvis.autodiff import Tape, Tensor
from stgvis.gradcheck import check_gradients
from stgvis.segment import (FILTER_SIZE, SegHead, WarpParams, controller_forward, dice_loss, init_dynamic_filters,
                            mask_forward, mask_forward_batch, pack_filters, position_map, position_maps,
                            predict_offsets, reduce_channels, unpack_filters, warp_filters)


def test_filter_size():
    assert FILTER_SIZE == 88 + 72 + 9 == 169


class TestPacking:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_unpack_pack_identity(self, seed):
        theta = np.random.default_rng(seed).normal(size=FILTER_SIZE)
        np.testing.assert_array_equal(pack_filters(unpack_filters(theta)), theta)

    def test_layer_shapes(self):
        shapes = [(w.shape, b.shape) for w, b in unpack_filters(np.zeros(FILTER_SIZE))]
        assert shapes == [((8, 10), (8,)), ((8, 8), (8,)), ((1, 8), (1,))]

    def test_layout_is_weights_then_bias(self):
        layers = unpack_filters(np.arange(FILTER_SIZE, dtype=float))
        assert layers[0][0][0, 0] == 0 and layers[0][1][0] == 80 and layers[1][0][0, 0] == 88
        assert layers[2][1][0] == 168

    def test_batched_unpack(self):
        theta = np.random.default_rng(0).normal(size=(4, FILTER_SIZE))
        layers = unpack_filters(theta)
        assert layers[0][0].shape == (4, 8, 10)
        np.testing.assert_array_equal(layers[1][0][2], unpack_filters(theta[2])[1][0])

    def test_wrong_size(self):
        with pytest.raises(ValueError, match="169"):
            unpack_filters(np.zeros(168))
        with pytest.raises(ValueError):
            pack_filters([(np.zeros((8, 9)), np.zeros(8))] * 3)


class TestController:
    def test_shapes(self):
        head = SegHead.init(np.random.default_rng(0), dim=6, hidden=5)
        feat = np.random.default_rng(1).normal(size=(6, 7, 5))
        assert controller_forward(head, feat).shape == (169, 7, 5)
        assert reduce_channels(head, feat).shape == (8, 7, 5)

    def test_zero_weights_give_bias(self):
        head = SegHead.init(np.random.default_rng(0), dim=4, hidden=3)
        for conv in head.controller:
            conv.weight.data[:] = 0
        out = controller_forward(head, np.random.default_rng(1).normal(size=(4, 3, 3))).data
        np.testing.assert_array_equal(out, np.broadcast_to(head.controller[1].bias.data[:, None, None], out.shape))

    def test_identity_reducer(self):
        head = SegHead.init(np.random.default_rng(0), dim=10, hidden=3)
        head.reducer.weight.data[:] = np.eye(8, 10)[:, :, None, None]
        head.reducer.bias.data[:] = 0
        feat = np.random.default_rng(1).normal(size=(10, 4, 4))
        np.testing.assert_array_equal(reduce_channels(head, feat).data, feat[:8])

    def test_gradcheck_controller(self):
        rng = np.random.default_rng(2)
        head = SegHead.init(rng, dim=3, hidden=4)
        feat = Tensor(rng.normal(size=(3, 4, 4)))
        w = rng.normal(size=(169, 4, 4))
        assert check_gradients(lambda: ad.mul(controller_forward(head, feat), w), [feat]) < 1e-4

    def test_reducer_gradient_nonzero(self):
        head = SegHead.init(np.random.default_rng(0), dim=4, hidden=3)
        feat = Tensor(np.random.default_rng(1).normal(size=(4, 3, 3)), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_(reduce_channels(head, feat))
        tape.backward(loss)
        assert np.abs(feat.grad).sum() > 0 and np.abs(head.reducer.weight.grad).sum() > 0


class TestPositionMap:
    def test_self_offset_is_zero(self):
        p = position_map((3, 2), 5, 6)
        np.testing.assert_array_equal(p[:, 2, 3], [0, 0])

    def test_row_values(self):
        p = position_map((0, 0), 4, 4)
        np.testing.assert_array_equal(p[0, 0], [0, 0.25, 0.5, 0.75])
        np.testing.assert_array_equal(p[1, :, 0], [0, 0.25, 0.5, 0.75])

    def test_normaliser_is_longer_side(self):
        p = position_map((0, 0), 2, 8)
        assert p[1, 1, 0] == 1 / 8

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 5), st.integers(0, 4), st.integers(0, 5), st.integers(0, 4))
    def test_antisymmetry(self, ax, ay, bx, by):
        pa, pb = position_map((ax, ay), 5, 6), position_map((bx, by), 5, 6)
        np.testing.assert_allclose(pa[:, by, bx], -pb[:, ay, ax], atol=1e-15)

    def test_batch(self):
        pm = position_maps([(1, 1), (2, 0)], 3, 3)
        np.testing.assert_array_equal(pm[1], position_map((2, 0), 3, 3))


class TestMaskHead:
    def test_zero_theta_constant(self):
        reduced = np.random.default_rng(0).normal(size=(8, 5, 5))
        out = mask_forward(reduced, position_map((2, 2), 5, 5), np.zeros(FILTER_SIZE)).data
        assert out.shape == (5, 5) and np.all(out == 0)

    def test_bias_only_theta(self):
        theta = np.zeros(FILTER_SIZE)
        theta[-1] = 1.7
        out = mask_forward(np.ones((8, 3, 3)), position_map((1, 1), 3, 3), theta).data
        np.testing.assert_array_equal(out, 1.7)

    def test_matches_explicit_convolutions(self):
        rng = np.random.default_rng(1)
        reduced, theta = rng.normal(size=(8, 4, 6)), rng.normal(size=FILTER_SIZE)
        pos = position_map((2, 1), 4, 6)
        x = np.concatenate([reduced, pos]).reshape(10, -1)
        (w1, b1), (w2, b2), (w3, b3) = unpack_filters(theta)
        x = np.maximum(w1 @ x + b1[:, None], 0)
        x = np.maximum(w2 @ x + b2[:, None], 0)
        ref = (w3 @ x + b3[:, None]).reshape(4, 6)
        np.testing.assert_allclose(mask_forward(reduced, pos, theta).data, ref, atol=1e-12)

    def test_different_centres_differ(self):
        rng = np.random.default_rng(2)
        reduced, theta = rng.normal(size=(8, 6, 6)), init_dynamic_filters(rng)
        a = mask_forward(reduced, position_map((1, 1), 6, 6), theta).data
        b = mask_forward(reduced, position_map((4, 4), 6, 6), theta).data
        assert not np.allclose(a, b)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(3)
        reduced = rng.normal(size=(8, 5, 5))
        thetas = rng.normal(size=(3, FILTER_SIZE))
        centres = [(0, 0), (2, 3), (4, 1)]
        batch = mask_forward_batch(reduced, position_maps(centres, 5, 5), thetas).data
        for i, c in enumerate(centres):
            np.testing.assert_allclose(batch[i], mask_forward(reduced, position_map(c, 5, 5), thetas[i]).data,
                                       atol=1e-12)

    def test_gradcheck(self):
        rng = np.random.default_rng(4)
        reduced = Tensor(rng.normal(size=(8, 3, 3)))
        theta = Tensor(rng.normal(size=FILTER_SIZE))
        pos = position_map((1, 0), 3, 3)
        assert check_gradients(lambda: mask_forward(reduced, pos, theta), [theta, reduced]) < 1e-4


class TestWarp:
    def test_zero_offsets_reduce_to_conv(self):
        rng = np.random.default_rng(0)
        p = WarpParams.init(rng, dim=4, hidden=3)
        for conv in p.offset_head:
            conv.weight.data[:] = 0
            conv.bias.data[:] = 0
        p.kernel.data = rng.normal(size=(3, 3))
        feat = rng.normal(size=(4, 5, 5))
        theta = rng.normal(size=(169, 5, 5))
        out = warp_filters(p, feat, feat, theta).data
        k = Tensor(p.kernel.data[None, None])
        ref = np.stack([ad.conv2d(Tensor(theta[c : c + 1]), k, pad=1).data[0] for c in range(169)])
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_constant_shift(self):
        # content moved right by two columns; offsets read two columns back
        rng = np.random.default_rng(1)
        h, w = 6, 9
        theta = rng.normal(size=(169, h, w))
        p = WarpParams.init(rng, dim=2, hidden=2)
        off = np.zeros((18, h, w))
        off[0::2] = -2.0
        out = warp_filters(p, None, None, theta, offsets=Tensor(off)).data
        np.testing.assert_allclose(out[:, :, 2:], theta[:, :, :-2], atol=1e-12)

    def test_shape_and_initial_identity(self):
        rng = np.random.default_rng(2)
        p = WarpParams.init(rng, dim=4)
        feat = rng.normal(size=(4, 6, 6))
        theta = rng.normal(size=(169, 6, 6))
        out = warp_filters(p, feat, feat + 0.01, theta).data
        assert out.shape == theta.shape
        # near-zero initial offsets and delta kernel keep filters almost unchanged
        np.testing.assert_allclose(out, theta, atol=0.05)

    def test_gradients_reach_everything(self):
        rng = np.random.default_rng(3)
        p = WarpParams.init(rng, dim=2, hidden=2)
        fk, ft = Tensor(rng.normal(size=(2, 4, 4))), Tensor(rng.normal(size=(2, 4, 4)))
        theta = Tensor(rng.normal(size=(169, 4, 4)), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_(ad.mul(warp_filters(p, fk, ft, theta), rng.normal(size=(169, 4, 4))))
        tape.backward(loss)
        for t in [theta, p.kernel, p.offset_head[0].weight, p.offset_head[1].weight]:
            assert np.abs(t.grad).sum() > 0

    def test_offsets_shape(self):
        p = WarpParams.init(np.random.default_rng(0), dim=3, hidden=2)
        assert predict_offsets(p, np.zeros((3, 4, 5)), np.ones((3, 4, 5))).shape == (18, 4, 5)


class TestDice:
    def test_perfect(self):
        g = np.array([[1.0, 0, 1], [0, 1, 1]])
        assert dice_loss(g, g).item() < 1e-4

    def test_disjoint(self):
        assert dice_loss(np.array([1.0, 1, 0, 0]), np.array([0.0, 0, 1, 1])).item() > 0.999

    def test_half_overlap(self):
        assert dice_loss(np.array([1.0, 1, 0]), np.array([1.0, 0, 1])).item() == pytest.approx(0.5, abs=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice_loss(np.zeros(3), np.zeros(4))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6))
    def test_range_and_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        p = (rng.uniform(size=(4, 4)) > 0.5).astype(float)
        g = (rng.uniform(size=(4, 4)) > 0.5).astype(float)
        a, b = dice_loss(p, g).item(), dice_loss(g, p).item()
        assert -1e-5 <= a <= 1 + 1e-5 and a == pytest.approx(b, abs=1e-12)

    def test_gradcheck(self):
        rng = np.random.default_rng(5)
        p = Tensor(rng.uniform(0.1, 0.9, size=(3, 4)))
        g = rng.uniform(size=(3, 4)) > 0.5
        assert check_gradients(lambda: dice_loss(p, g), [p]) < 1e-4
