import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eafpmed import explain as xp
from eafpmed.netpbm import read

from builders import batch, composed


class TestWeights:
    def test_single_channel_by_hand(self):
        a = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        g = np.ones((1, 2, 2))
        # alpha = 1 / (2 + 2), four cells with relu(g) = 1
        assert xp.campp_weights(a, g)[0] == pytest.approx(1.0)

    def test_two_channels_by_hand(self):
        a = np.array([[[2.0, 0.0], [0.0, 0.0]], [[1.0, 1.0], [1.0, 1.0]]])
        g = np.array([[[0.5, 0.0], [0.0, 0.0]], [[-1.0, -1.0], [-1.0, -1.0]]])
        w = xp.campp_weights(a, g)
        # channel 0: alpha = 0.25 / (0.5 + 2 * 0.125) = 1/3 at the only nonzero gradient
        assert w[0] == pytest.approx(0.5 / 3)
        assert w[1] == 0.0

    def test_zero_gradient(self):
        assert np.all(xp.campp_weights(np.ones((3, 2, 2)), np.zeros((3, 2, 2))) == 0)


class TestNormalize:
    def test_zero_map(self):
        np.testing.assert_array_equal(xp.normalize(np.zeros((3, 3))), 0)

    def test_constant_positive(self):
        np.testing.assert_array_equal(xp.normalize(np.full((2, 2), 4.0)), 1)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=30))
    @settings(max_examples=50)
    def test_range(self, vals):
        out = xp.normalize(np.array(vals))
        assert out.min() >= 0 and out.max() <= 1


class TestColormap:
    def test_anchors(self):
        rgb = xp.colormap(np.array([0.0, 0.5, 1.0]))
        np.testing.assert_array_equal(rgb, [[0, 0, 255], [0, 255, 0], [255, 0, 0]])

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            xp.colormap(np.array([1.5]))

    def test_overlay(self, tmp_path):
        path = xp.write_heatmap(tmp_path / "h.ppm", np.zeros((4, 4)), np.ones((1, 4, 4)), alpha=0.5)
        px = np.rint(read(path) * 255)
        np.testing.assert_array_equal(px[0, 0], [128, 128, 255])

    def test_gb_gray(self):
        out = xp.gb_gray(np.array([[[-2.0, 0.0, 1.0]]]))
        np.testing.assert_allclose(out, [[0.0, 0.5, 0.75]])
        np.testing.assert_array_equal(xp.gb_gray(np.zeros((1, 2, 2))), 0.5)


@pytest.fixture(scope="module")
def model():
    return composed()


class TestOnModel:
    def test_cam_range_and_shape(self, model):
        for layer in ("stem", model.default_cam_layer, "eafp.out"):
            cam = xp.grad_campp(model, batch(1)[0], 1, layer)
            assert cam.heatmap.shape == (16, 16)
            assert np.all(np.isfinite(cam.heatmap))
            assert cam.heatmap.min() >= 0 and cam.heatmap.max() <= 1

    def test_no_gradient_leak(self, model):
        xp.grad_campp(model, batch(1)[0], 0)
        assert all(p.grad is None for p in model.backbone.parameters())

    def test_unknown_layer(self, model):
        with pytest.raises(KeyError):
            xp.grad_campp(model, batch(1)[0], 0, "nowhere")

    def test_category_range(self, model):
        with pytest.raises(IndexError):
            xp.grad_campp(model, batch(1)[0], 5)

    def test_guided(self, model):
        gb = xp.guided_backprop(model, batch(1)[0], 2)
        assert gb.shape == (1, 16, 16) and np.all(np.isfinite(gb))
        again = xp.guided_backprop(model, batch(1)[0], 2)
        assert gb.tobytes() == again.tobytes()

    def test_cam_gb(self, model):
        cam = xp.grad_campp(model, batch(1)[0], 2)
        gb = xp.guided_backprop(model, batch(1)[0], 2)
        out = xp.cam_gb(cam, gb)
        assert out.shape == (16, 16) and out.min() >= 0 and out.max() <= 1
        with pytest.raises(ValueError):
            xp.cam_gb(cam, np.ones((1, 8, 8)))


def test_argmax_in_box():
    heat = np.zeros((8, 8))
    heat[3, 5] = 1
    assert xp.argmax_in_box(heat, (2, 4, 3, 5))
    assert not xp.argmax_in_box(heat, (0, 0, 2, 8))
