import io

import numpy as np
import pytest

from bsnerf.field import (
    FieldArch,
    FieldError,
    SpectralField,
    field_backward,
    field_forward,
    load_field,
    positional_encode,
    positional_encode_backward,
    read_field,
    save_field,
    write_field,
)
from gradcheck import central_diff, rel_err


def unit_dirs(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def perturbed_field(arch, rng, seed=0, scale=0.1):
    f = SpectralField.initialize(arch, seed=seed)
    return f.with_theta(f.theta + rng.normal(0, scale, f.theta.size))


# --- encoding ---------------------------------------------------------------------


def test_encoding_at_origin():
    expected = [0, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0, 0, 1, 1, 1]
    np.testing.assert_array_equal(positional_encode(np.zeros(3), 2), expected)


def test_encoding_half_period():
    enc = positional_encode(np.array([1.0, 0, 0]), 1)
    assert abs(enc[3]) < 1e-15
    assert enc[6] == -1.0


@pytest.mark.parametrize("L", [0, 1, 4, 10])
def test_encoding_shape(L, rng):
    assert positional_encode(rng.normal(size=3), L).shape == (3 + 6 * L,)
    assert positional_encode(rng.normal(size=(5, 3)), L).shape == (5, 3 + 6 * L)


def test_encoding_backward(rng):
    v = rng.uniform(-0.5, 0.5, size=(4, 3))
    up = rng.normal(size=(4, 27))
    fd = central_diff(lambda x: np.sum(positional_encode(x, 4) * up), v, h=1e-6)
    assert rel_err(positional_encode_backward(v, 4, up), fd) < 1e-8


# --- forward ----------------------------------------------------------------------


def test_zero_parameters_closed_form(rng):
    arch = FieldArch(width=16, view_width=8)
    f = SpectralField(arch, np.zeros(arch.param_count))
    sigma, spec, _ = f.forward(rng.normal(size=(3, 3)), unit_dirs(rng, 3))
    np.testing.assert_allclose(sigma, np.log(2.0), rtol=0, atol=1e-15)
    np.testing.assert_array_equal(spec, 0.5)


def test_density_ignores_direction(rng):
    f = perturbed_field(FieldArch(width=32, view_width=16), rng, scale=0.3)
    x = rng.normal(size=(20, 3))
    s1, sp1, _ = f.forward(x, unit_dirs(rng, 20))
    s2, sp2, _ = f.forward(x, unit_dirs(rng, 20))
    np.testing.assert_array_equal(s1, s2)
    assert not np.allclose(sp1, sp2)


def test_output_ranges_and_determinism(rng):
    for seed in range(5):
        f = perturbed_field(FieldArch(width=32, view_width=16), rng, seed, scale=1.0)
        x, d = rng.normal(size=(200, 3)), unit_dirs(rng, 200)
        sigma, spec, _ = f.forward(x, d)
        assert np.all(np.isfinite(sigma)) and np.all(sigma >= 0)
        assert np.all((spec >= 0) & (spec <= 1))
        sigma2, spec2, _ = f.forward(x, d)
        assert sigma.tobytes() == sigma2.tobytes() and spec.tobytes() == spec2.tobytes()


def test_parameter_validation():
    arch = FieldArch(width=8, view_width=4)
    with pytest.raises(FieldError):
        SpectralField(arch, np.zeros(arch.param_count + 1))
    theta = np.zeros(arch.param_count)
    theta[3] = np.nan
    with pytest.raises(FieldError):
        SpectralField(arch, theta)
    with pytest.raises(FieldError):
        FieldArch(depth=4, skip=4)


def test_default_architecture():
    arch = FieldArch()
    assert (arch.depth, arch.width, arch.skip, arch.pos_freqs, arch.dir_freqs, arch.bins) == (4, 128, 2, 10, 4, 24)
    names = [n for n, _, _ in arch.layers()]
    assert names == ["trunk0", "trunk1", "trunk2", "trunk3", "sigma", "feature", "view", "spectrum"]
    assert dict((n, i) for n, i, _ in arch.layers())["trunk2"] == 128 + 63


# --- backward ---------------------------------------------------------------------


def test_zero_upstream_gives_zero_gradients(rng):
    f = perturbed_field(FieldArch(width=16, view_width=8), rng)
    _, spec, cache = f.forward(rng.normal(size=(6, 3)), unit_dirs(rng, 6))
    g, gx, gd = f.backward(cache, np.zeros(6), np.zeros_like(spec))
    assert not g.any() and not gx.any() and not gd.any()


def test_shape_mismatch(rng):
    f = perturbed_field(FieldArch(width=8, view_width=4), rng)
    _, spec, cache = f.forward(rng.normal(size=(6, 3)), unit_dirs(rng, 6))
    with pytest.raises(FieldError):
        f.backward(cache, np.zeros(5), np.zeros_like(spec))


def test_toy_network_hand_derivation():
    """depth 1, width 2, no encodings, one view unit, one bin.

    h = relu(x W0 + b0); sigma = softplus(h ws + bs); f = h Wf + bf;
    hv = relu(f wvf + d wvd + bv); s = sigmoid(hv wsp + bsp).
    With both ReLUs active:
      dsigma/dW0[i, j] = sig'(.) ws[j] x[i]
      ds/dbv        = s (1 - s) wsp
      ds/dW0[i, j]  = s (1 - s) wsp (Wf[j] . wvf) x[i]
      ds/dd         = s (1 - s) wsp wvd
    """
    arch = FieldArch(depth=1, width=2, skip=None, pos_freqs=0, dir_freqs=0, bins=1, view_width=1)
    W0 = np.array([[0.5, -0.2], [0.3, 0.4], [-0.1, 0.6]])
    b0 = np.array([0.1, 0.2])
    ws, bs = np.array([[0.7], [-0.3]]), np.array([0.05])
    Wf, bf = np.array([[0.2, -0.5], [0.4, 0.1]]), np.array([0.0, 0.1])
    wv = np.array([[0.6], [0.3], [0.2], [-0.4], [0.5]])  # rows: f0, f1, d0, d1, d2
    bv = np.array([0.3])
    wsp, bsp = np.array([[0.8]]), np.array([-0.1])
    theta = np.concatenate([p.ravel() for p in (W0, b0, ws, bs, Wf, bf, wv, bv, wsp, bsp)])
    f = SpectralField(arch, theta)
    x = np.array([[0.3, 0.2, 0.1]])
    d = np.array([[0.0, 0.6, 0.8]])

    h = x @ W0 + b0
    assert np.all(h > 0)
    z_sigma = (h @ ws + bs).item()
    feat = h @ Wf + bf
    zv = (feat @ wv[:2] + d @ wv[2:] + bv).item()
    assert zv > 0
    s = 1 / (1 + np.exp(-(zv * wsp[0, 0] + bsp[0])))
    dsig = 1 / (1 + np.exp(-z_sigma))

    sigma, spec, cache = f.forward(x, d)
    assert sigma[0] == pytest.approx(np.log1p(np.exp(z_sigma)), abs=1e-15)
    assert spec[0, 0] == pytest.approx(s, abs=1e-15)

    g, gx, gd = f.backward(cache, np.array([1.0]), np.zeros((1, 1)))
    np.testing.assert_allclose(f.with_theta(g).params()["trunk0"][0], dsig * np.outer(x[0], ws[:, 0]), atol=1e-15)
    np.testing.assert_allclose(gx[0], dsig * (W0 @ ws[:, 0]), atol=1e-15)
    assert not gd.any()

    g, gx, gd = f.backward(cache, np.array([0.0]), np.ones((1, 1)))
    p = f.with_theta(g).params()
    ss = s * (1 - s) * wsp[0, 0]
    assert p["view"][1][0] == pytest.approx(ss, abs=1e-15)
    np.testing.assert_allclose(p["trunk0"][0], ss * np.outer(x[0], Wf @ wv[:2, 0]), atol=1e-15)
    np.testing.assert_allclose(gd[0], ss * wv[2:, 0], atol=1e-15)


SMALL = FieldArch(depth=4, width=12, skip=2, pos_freqs=3, dir_freqs=2, bins=5, view_width=6)


@pytest.mark.parametrize("seed", range(4))
def test_gradients_small_network_all_coordinates(seed):
    rng = np.random.default_rng(seed)
    f = perturbed_field(SMALL, rng, seed)
    x = rng.uniform(-0.5, 0.5, (5, 3))
    d = unit_dirs(rng, 5)
    up_s, up_sp = rng.normal(size=5), rng.normal(size=(5, SMALL.bins))

    def loss(theta=f.theta, x=x, d=d):
        sigma, spec, _ = f.with_theta(theta).forward(x, d)
        return sigma @ up_s + np.sum(spec * up_sp)

    _, _, cache = f.forward(x, d)
    g, gx, gd = field_backward(f, cache, up_s, up_sp)
    assert rel_err(g, central_diff(lambda t: loss(theta=t), f.theta, 1e-5)) < 1e-5
    assert rel_err(gx, central_diff(lambda v: loss(x=v), x, 1e-5)) < 1e-5
    assert rel_err(gd, central_diff(lambda v: loss(d=v), d, 1e-5)) < 1e-5


def test_gradients_default_network_sampled_coordinates(rng):
    f = perturbed_field(FieldArch(), rng, scale=0.02)
    x = rng.uniform(-0.5, 0.5, (3, 3))
    d = unit_dirs(rng, 3)
    up_s, up_sp = rng.normal(size=3), rng.normal(size=(3, 24))
    _, _, cache = field_forward(f, x, d)
    g, gx, gd = f.backward(cache, up_s, up_sp)

    def loss(theta=f.theta, x=x, d=d):
        sigma, spec, _ = f.with_theta(theta).forward(x, d)
        return sigma @ up_s + np.sum(spec * up_sp)

    idx = rng.choice(f.theta.size, 150, replace=False)
    fd = []
    for i in idx:
        e = np.zeros_like(f.theta)
        e[i] = 1e-5
        fd.append((loss(theta=f.theta + e) - loss(theta=f.theta - e)) / 2e-5)
    assert rel_err(g[idx], fd) < 1e-5
    # with 2^9 pi frequencies a step of 1e-5 already moves some of the 128 ReLUs
    # across their kink, so input gradients use a much smaller step
    assert rel_err(gx, central_diff(lambda v: loss(x=v), x, 1e-7, order=4)) < 1e-5
    assert rel_err(gd, central_diff(lambda v: loss(d=v), d, 1e-7, order=4)) < 1e-5


def test_float32_path_close_to_float64(rng):
    f64 = perturbed_field(FieldArch(width=32, view_width=16), rng)
    f32 = f64.with_theta(f64.theta.astype(np.float32))
    x, d = rng.uniform(-0.5, 0.5, (50, 3)), unit_dirs(rng, 50)
    s64, sp64, _ = f64.forward(x, d)
    s32, sp32, c32 = f32.forward(x, d)
    assert s32.dtype == np.float32 and sp32.dtype == np.float32
    np.testing.assert_allclose(s32, s64, rtol=1e-4, atol=1e-5)
    np.testing.assert_allclose(sp32, sp64, rtol=1e-4, atol=1e-5)
    g32, _, _ = f32.backward(c32, np.ones(50), np.ones((50, 24)), input_grads=False)
    assert g32.dtype == np.float32


# --- checkpoint ---------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    f = perturbed_field(FieldArch(width=16, view_width=8), rng)
    save_field(tmp_path / "f.bin", f)
    g = load_field(tmp_path / "f.bin")
    assert g.arch == f.arch
    assert g.theta.tobytes() == f.theta.tobytes()
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:8] == b"BSNFIELD"
    assert raw[-8:] == f.theta[-1:].astype("<f8").tobytes()


def test_checkpoint_errors(tmp_path, rng):
    f = perturbed_field(FieldArch(width=8, view_width=4), rng)
    buf = io.BytesIO()
    write_field(buf, f)
    raw = buf.getvalue()
    with pytest.raises(FieldError, match="magic"):
        read_field(io.BytesIO(b"XXXXXXXX" + raw[8:]))
    with pytest.raises(FieldError, match="truncated"):
        read_field(io.BytesIO(raw[:-16]))
