import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stgvis import autodiff as ad
from stgvis.autodiff import Tensor
from stgvis.gradcheck import check_gradients
from stgvis.layers import (BackboneParams, MlpParams, backbone_forward, deform_sample, deformable_conv,
                           flatten_node_feature, mlp_forward, roi_align)


def mlp_of(ws, bs):
    return MlpParams([Tensor(w) for w in ws], [Tensor(b) for b in bs])


class TestMlp:
    def test_zero_weights_give_bias(self):
        p = mlp_of([np.zeros((3, 2))], [np.array([1.5, -2.0])])
        np.testing.assert_array_equal(mlp_forward(p, Tensor([1.0, 2, 3])).data, [1.5, -2.0])

    def test_identity_layer(self):
        x = np.array([-1.0, 2.0, 0.5])
        np.testing.assert_array_equal(mlp_forward(mlp_of([np.eye(3)], [np.zeros(3)]), Tensor(x)).data, x)

    def test_last_layer_has_no_relu(self):
        p = mlp_of([np.eye(2), -np.eye(2)], [np.zeros(2), np.zeros(2)])
        np.testing.assert_array_equal(mlp_forward(p, Tensor([1.0, -1.0])).data, [-1.0, 0.0])

    def test_batch_rows_match_vectors(self):
        p = MlpParams.init(np.random.default_rng(0), [4, 6, 3])
        x = np.random.default_rng(1).normal(size=(5, 4))
        batch = mlp_forward(p, Tensor(x)).data
        for i in range(5):
            np.testing.assert_allclose(batch[i], mlp_forward(p, Tensor(x[i])).data, atol=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="expects 4"):
            mlp_forward(MlpParams.init(np.random.default_rng(0), [4, 2]), Tensor(np.zeros(3)))

    def test_chaining_validated(self):
        with pytest.raises(ValueError, match="chain"):
            mlp_of([np.zeros((3, 2)), np.zeros((3, 1))], [np.zeros(2), np.zeros(1)])

    def test_gradcheck(self):
        rng = np.random.default_rng(2)
        p = MlpParams.init(rng, [5, 7, 3])
        x = Tensor(rng.normal(size=(4, 5)))
        params = p.weights + p.biases + [x]
        assert check_gradients(lambda: mlp_forward(p, x), params) < 1e-5


class TestBackbone:
    def test_output_shape(self):
        p = BackboneParams.init(np.random.default_rng(0), dim=16, width=4)
        assert backbone_forward(p, np.zeros((3, 32, 24))).shape == (16, 8, 6)

    def test_deterministic(self):
        p = BackboneParams.init(np.random.default_rng(0), dim=8, width=4)
        img = np.random.default_rng(1).uniform(size=(3, 16, 16))
        assert backbone_forward(p, img).data.tobytes() == backbone_forward(p, img).data.tobytes()

    @pytest.mark.parametrize("shape", [(3, 30, 32), (1, 32, 32)])
    def test_bad_input(self, shape):
        p = BackboneParams.init(np.random.default_rng(0), dim=8, width=4)
        with pytest.raises(ValueError):
            backbone_forward(p, np.zeros(shape))


class TestRoiAlign:
    @settings(max_examples=40, deadline=None)
    @given(st.floats(-3, 10), st.floats(-3, 10), st.floats(0.1, 8), st.floats(0.1, 8), st.floats(-5, 5))
    def test_constant_field(self, x1, y1, bw, bh, c):
        out = roi_align(Tensor(np.full((2, 8, 8), c)), (x1, y1, x1 + bw, y1 + bh)).data
        np.testing.assert_allclose(out, c, atol=1e-12)

    def test_single_pixel_box(self):
        f = np.random.default_rng(0).normal(size=(3, 6, 6))
        np.testing.assert_allclose(roi_align(Tensor(f), (2, 4, 3, 5), out=1).data[:, 0, 0], f[:, 4, 2])
        # with the default 3x3 grid the centre sample still lands on the pixel centre
        np.testing.assert_allclose(roi_align(Tensor(f), (2, 4, 3, 5)).data[:, 1, 1], f[:, 4, 2])

    def test_pixel_aligned_crop(self):
        f = np.random.default_rng(1).normal(size=(2, 8, 8))
        np.testing.assert_allclose(roi_align(Tensor(f), (1, 2, 4, 5)).data, f[:, 2:5, 1:4], atol=1e-12)

    def test_box_outside_is_clamped(self):
        out = roi_align(Tensor(np.ones((1, 4, 4))), (10, 10, 12, 12)).data
        np.testing.assert_allclose(out, 1.0)

    def test_gradcheck(self):
        rng = np.random.default_rng(3)
        f = Tensor(rng.normal(size=(2, 6, 7)))
        w = rng.normal(size=(2, 3, 3))
        assert check_gradients(lambda: ad.mul(roi_align(f, (0.7, 1.3, 4.2, 5.1)), w), [f]) < 1e-4


class TestFlatten:
    def test_constant(self):
        np.testing.assert_allclose(flatten_node_feature(Tensor(np.full((4, 3, 3), 2.5))).data, 2.5)

    def test_mean(self):
        assert flatten_node_feature(Tensor([[[1.0, 3.0], [5.0, 7.0]]])).data[0] == 4.0

    def test_linearity(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 3, 3)), rng.normal(size=(3, 3, 3))
        np.testing.assert_allclose(flatten_node_feature(Tensor(a + b)).data,
                                   flatten_node_feature(Tensor(a)).data + flatten_node_feature(Tensor(b)).data)


class TestDeformable:
    def test_zero_offsets_match_conv(self):
        rng = np.random.default_rng(0)
        x, k = rng.normal(size=(3, 6, 5)), rng.normal(size=(2, 3, 3, 3))
        out = deformable_conv(Tensor(x), Tensor(k), Tensor(np.zeros((18, 6, 5)))).data
        np.testing.assert_allclose(out, ad.conv2d(Tensor(x), Tensor(k), pad=1).data, atol=1e-12)

    def test_shared_kernel_is_depthwise(self):
        rng = np.random.default_rng(1)
        x, k = rng.normal(size=(4, 5, 5)), rng.normal(size=(3, 3))
        out = deformable_conv(Tensor(x), Tensor(k), Tensor(np.zeros((18, 5, 5)))).data
        for c in range(4):
            ref = ad.conv2d(Tensor(x[c : c + 1]), Tensor(k[None, None]), pad=1).data[0]
            np.testing.assert_allclose(out[c], ref, atol=1e-12)

    def test_unit_shift_on_ramp(self):
        # every tap reads one column to the right; away from the borders this is
        # the plain conv of the input shifted left by one column
        h, w = 5, 8
        x = np.tile(np.arange(w, dtype=float), (h, 1))[None]
        k = np.random.default_rng(2).normal(size=(1, 1, 3, 3))
        off = np.zeros((18, h, w))
        off[0::2] = 1.0
        out = deformable_conv(Tensor(x), Tensor(k), Tensor(off)).data
        shifted = np.zeros_like(x)
        shifted[..., :-1] = x[..., 1:]
        ref = ad.conv2d(Tensor(shifted), Tensor(k), pad=1).data
        np.testing.assert_allclose(out[:, 1:-1, 1 : w - 2], ref[:, 1:-1, 1 : w - 2], atol=1e-12)

    def test_out_of_bounds_reads_zero(self):
        off = np.full((18, 3, 3), 50.0)
        cols = deform_sample(Tensor(np.ones((1, 3, 3))), Tensor(off)).data
        assert np.all(cols == 0)

    def test_bad_offset_shape(self):
        with pytest.raises(ValueError, match="18"):
            deform_sample(Tensor(np.zeros((1, 3, 3))), Tensor(np.zeros((9, 3, 3))))

    def test_gradcheck_all_inputs(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(2, 4, 5)))
        k = Tensor(rng.normal(size=(2, 2, 3, 3)))
        off = Tensor(rng.uniform(-1.4, 1.4, size=(18, 4, 5)))
        assert check_gradients(lambda: deformable_conv(x, k, off), [x, k, off]) < 1e-4

    def test_dense_depthwise_path_matches_sampling(self, monkeypatch):
        import stgvis.layers as layers
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(3, 4, 5)))
        k = Tensor(rng.normal(size=(3, 3)))
        off = Tensor(rng.uniform(-2.5, 2.5, size=(18, 4, 5)))
        w = rng.normal(size=(3, 4, 5))
        fn = lambda: ad.mul(deformable_conv(x, k, off), w)
        from stgvis.gradcheck import analytic_grads
        dense = fn().data, analytic_grads(fn, [x, k, off])
        monkeypatch.setattr(layers, "DENSE_SAMPLING_LIMIT", 0)
        sampled = fn().data, analytic_grads(fn, [x, k, off])
        np.testing.assert_allclose(dense[0], sampled[0], atol=1e-12)
        for a, b in zip(dense[1], sampled[1]):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_gradcheck_depthwise(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(2, 3, 4)))
        k = Tensor(rng.normal(size=(3, 3)))
        off = Tensor(rng.uniform(-1.4, 1.4, size=(18, 3, 4)))
        w = rng.normal(size=(2, 3, 4))
        assert check_gradients(lambda: ad.mul(deformable_conv(x, k, off), w), [x, k, off]) < 1e-4
