import numpy as np
import pytest

from conftest import make_model
from oracles import finite_difference
from probcontour import autodiff as ad
from probcontour.encoder import (
    DET_PCA,
    DIRECT_VERTEX,
    PROBABILISTIC,
    ArchitectureError,
    NonFiniteActivationError,
    build,
    cl9p3dl1,
    forward,
    forward_baseline,
    load_checkpoint,
    save_checkpoint,
)
from probcontour.loss import predicted_contours


def _zero_head(net):
    for name, p in net.params.items():
        if name.startswith("dense"):
            p.data[...] = 0.0


def test_output_dim_for_60x60_k8():
    assert cl9p3dl1((60, 60), PROBABILISTIC, 8).output_dim == 18


def test_build_is_deterministic():
    spec = cl9p3dl1((16, 16), widths=(2, 3, 4))
    a, b = build(spec, 7), build(spec, 7)
    np.testing.assert_array_equal(a.flat_parameters(), b.flat_parameters())
    assert not np.array_equal(a.flat_parameters(), build(spec, 8).flat_parameters())


def test_pool_collapse_names_layer():
    with pytest.raises(ArchitectureError, match="layer 20"):
        build(cl9p3dl1((4, 4), widths=(2, 2, 2)))


def test_zero_final_layer_gives_prior_outputs(rng):
    net = build(cl9p3dl1((12, 12), n_components=3, widths=(2, 2, 2)), 0)
    _zero_head(net)
    out = forward(net, rng.standard_normal((2, 12, 12)))
    for t in out:
        np.testing.assert_array_equal(t.data, 0.0)
    np.testing.assert_array_equal(out.latent_var, 1.0)


def test_forward_shapes_and_finite(rng):
    net = build(cl9p3dl1((60, 60), n_components=8, widths=(2, 2, 2)), 1)
    out = forward(net, rng.standard_normal((60, 60)))
    assert out.latent_mean.shape == (1, 8) and out.latent_logvar.shape == (1, 8) and out.shift.shape == (1, 2)
    assert all(np.all(np.isfinite(t.data)) for t in out)


def test_forward_gradient_matches_finite_differences(rng):
    net = build(cl9p3dl1((8, 8), n_components=2, widths=(2, 2, 2)), 3)
    for p in net.params.values():
        p.data[...] = rng.standard_normal(p.shape) * 0.5
    x = rng.standard_normal((2, 8, 8))

    def scalar():
        out = forward(net, x)
        return ad.add(ad.add(ad.reduce_sum(out.latent_mean), ad.reduce_sum(out.latent_logvar)), ad.reduce_sum(out.shift))

    with ad.Tape() as tape:
        root = scalar()
    grads = tape.backward(root)
    checked = 0
    for name, p in net.params.items():
        for _ in range(3):
            idx = tuple(rng.integers(0, s) for s in p.shape)
            fd = finite_difference(lambda: scalar().item(), p.data, idx)
            an = grads[p][idx]
            if abs(fd) < 1e-8 and abs(an) < 1e-8:
                continue  # dead ReLU path
            assert abs(an - fd) / max(abs(fd), abs(an)) < 1e-4, (name, idx, an, fd)
            checked += 1
    assert checked >= 10


def test_baseline_head_sizes():
    assert cl9p3dl1((60, 60), DIRECT_VERTEX, vertex_count=50).output_dim == 100
    assert cl9p3dl1((60, 60), DET_PCA, n_components=12).output_dim == 14


def test_det_pca_zero_head_decodes_mean_shape(rng):
    model = make_model(rng, 5, 3)
    net = build(cl9p3dl1((8, 8), DET_PCA, n_components=3, vertex_count=5, widths=(2, 2, 2)), 0)
    _zero_head(net)
    pred = predicted_contours(net, rng.standard_normal((2, 8, 8)), model, DET_PCA).data
    np.testing.assert_allclose(pred, np.tile(model.mean_, (2, 1)), atol=1e-12)


def test_mode_head_mismatch(rng):
    net = build(cl9p3dl1((8, 8), DIRECT_VERTEX, vertex_count=5, widths=(2, 2, 2)), 0)
    with pytest.raises(ValueError, match="does not match"):
        forward_baseline(net, np.zeros((8, 8)), DET_PCA)
    with pytest.raises(ValueError, match="probabilistic head"):
        forward(net, np.zeros((8, 8)))


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_non_finite_activation_reports_layer():
    net = build(cl9p3dl1((8, 8), widths=(2, 2, 2)), 0)
    net.params["conv4.weight"].data[0, 0, 0, 0] = np.inf
    with pytest.raises(NonFiniteActivationError) as err:
        forward(net, np.ones((8, 8)))
    assert err.value.layer == 4


def test_image_shape_mismatch():
    net = build(cl9p3dl1((8, 8), widths=(2, 2, 2)), 0)
    with pytest.raises(ArchitectureError):
        forward(net, np.zeros((9, 8)))


def test_checkpoint_round_trip_and_corruption(tmp_path, rng):
    net = build(cl9p3dl1((8, 8), n_components=2, widths=(2, 2, 2)), 5)
    save_checkpoint(net, tmp_path / "ck", extra={"epoch": 3})
    net2, manifest = load_checkpoint(tmp_path / "ck")
    np.testing.assert_array_equal(net2.flat_parameters(), net.flat_parameters())
    assert manifest["epoch"] == 3 and manifest["head_dim"] == 6
    x = rng.standard_normal((3, 8, 8))
    np.testing.assert_array_equal(forward(net, x).latent_mean.data, forward(net2, x).latent_mean.data)

    blob = tmp_path / "ck" / "params.bin"
    raw = bytearray(blob.read_bytes())
    raw[5] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="checksum"):
        load_checkpoint(tmp_path / "ck")
    blob.write_bytes(bytes(raw[:-8]))
    with pytest.raises(ValueError, match="bytes"):
        load_checkpoint(tmp_path / "ck")
