import numpy as np
from PIL import Image

from shufflemamba import data, erf
from shufflemamba import tensor as T
from shufflemamba.net import FusionNet, NetworkConfig, PermSource
from shufflemamba.rng import RngStream
from shufflemamba.tensor import Tensor


def test_single_conv_support_is_3x3():
    w = Tensor(np.random.default_rng(0).uniform(0.5, 1.0, size=(2, 3, 3, 3)))
    x = np.random.default_rng(1).normal(size=(1, 3, 9, 9))
    g = erf.center_gradient(lambda ts: T.conv2d(ts[0], w), [x])[0]
    support = np.argwhere(g > 0)
    assert support.min(axis=0).tolist() == [3, 3]
    assert support.max(axis=0).tolist() == [5, 5]
    assert len(support) == 9


def small_setup():
    cfg = NetworkConfig(d_model=8, state_size=4, n_rm=1, n_rcim=1, n_rmim=1)
    net = FusionNet(cfg, zero_init=False)
    scene = data.synthetic_scene(RngStream(0, 1), (16, 16))
    return net, data.wald_generate(scene, 4)


def test_raster_mode_is_fixed_scan():
    net, s = small_setup()
    emap = erf.erf_map(net, s, mode="raster")
    manual = erf.center_gradient(
        lambda ts: net.forward_batch(ts[0], ts[1], PermSource(None)), [s.M_up[None], s.P_in[None]])[0]
    assert np.array_equal(emap.raw, manual)
    assert emap.magnitude.max() == 1.0 and emap.magnitude.min() >= 0.0
    assert emap.magnitude[8, 8] > 0


def test_deterministic_and_chunk_free():
    net, s = small_setup()
    a = erf.erf_map(net, s, mode="shuffle", K=8, seed=3, chunk=8)
    b = erf.erf_map(net, s, mode="shuffle", K=8, seed=3, chunk=8)
    c = erf.erf_map(net, s, mode="shuffle", K=8, seed=3, chunk=3)
    assert np.array_equal(a.raw, b.raw)
    assert np.allclose(a.raw, c.raw, rtol=1e-12, atol=0)


def test_shuffle_spreads_receptive_field():
    net, s = small_setup()
    raster = erf.off_center_cv(erf.erf_map(net, s, mode="raster").magnitude)
    shuffle = erf.off_center_cv(erf.erf_map(net, s, mode="shuffle", K=32).magnitude)
    assert shuffle < raster


def test_off_center_cv_of_flat_map_is_zero():
    assert erf.off_center_cv(np.ones((11, 11))) == 0.0


def test_png_dimensions(tmp_path):
    net, s = small_setup()
    path = tmp_path / "erf.png"
    erf.erf_map(net, s, mode="raster").save_png(path)
    assert Image.open(path).size == (16, 16)
