import math

import numpy as np
import pytest
import sympy

from sslconvsac import autodiff as ad
from sslconvsac.errors import ConfigurationError, NumericError, UsageError

from conftest import check_grads

TOL = 1e-4


def T(a):
    return ad.Tensor(np.array(a, dtype=np.float64), requires_grad=True)


UNARY = {
    "relu": (ad.relu, lambda r: r.normal(size=(3, 4)) + 0.05),
    "sigmoid": (ad.sigmoid, lambda r: r.normal(size=(3, 4))),
    "tanh": (ad.tanh, lambda r: r.normal(size=(3, 4))),
    "exp": (ad.exp, lambda r: r.normal(size=(3, 4))),
    "log": (ad.log, lambda r: r.uniform(0.5, 2.0, size=(3, 4))),
    "sin": (ad.sin, lambda r: r.normal(size=(3, 4))),
    "cos": (ad.cos, lambda r: r.normal(size=(3, 4))),
    "neg": (ad.neg, lambda r: r.normal(size=(3, 4))),
    "clamp": (lambda x: ad.clamp(x, -0.5, 0.5), lambda r: r.uniform(-1, 1, size=(3, 4))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    fn, init = UNARY[name]
    x = T(init(rng))
    w = rng.normal(size=x.shape)
    # keep clamp probes away from the kinks
    if name == "clamp":
        x.data[np.abs(np.abs(x.data) - 0.5) < 1e-3] = 0.1
    assert check_grads(lambda: ad.tsum(fn(x) * w), [x]) < TOL


@pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul])
def test_binary_gradients(op, rng):
    a, b = T(rng.normal(size=(2, 3))), T(rng.normal(size=(2, 3)))
    s = T(rng.normal())
    assert check_grads(lambda: ad.tsum(op(a, b) * op(b, s)), [a, b, s]) < TOL


def test_reductions_and_shapes(rng):
    x = T(rng.normal(size=(2, 3, 4, 5)))
    y = T(rng.normal(size=(2, 1, 4, 5)))
    w = rng.normal(size=(2, 4, 4, 5))

    def build():
        z = ad.concat([x, y], axis=1) * w
        r = ad.reshape(ad.channels(z, 1, 3), (2, 40))
        return ad.tsum(ad.tsum(r, axis=1) * ad.tsum(r, axis=1)) + ad.mean(z)

    assert check_grads(build, [x, y]) < TOL


def test_gather_pixels(rng):
    x = T(rng.normal(size=(3, 2, 5, 5)))
    rows, cols = [0, 4, 2], [1, 3, 4]
    w = rng.normal(size=(3, 2, 1, 1))
    out = ad.gather_pixels(x, rows, cols)
    assert out.shape == (3, 2, 1, 1)
    assert out.data[1, 0, 0, 0] == x.data[1, 0, 4, 3]
    assert check_grads(lambda: ad.tsum(ad.gather_pixels(x, rows, cols) * w), [x]) < TOL


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv2d_forward_matches_scipy(k, rng):
    from scipy.signal import correlate

    x = rng.normal(size=(2, 3, 6, 7))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    y = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b)).data
    ref = np.array([[sum(correlate(x[n, c], w[o, c], mode="same") for c in range(3)) + b[o]
                     for o in range(4)] for n in range(2)])
    np.testing.assert_allclose(y, ref, atol=1e-12)


@pytest.mark.parametrize("k", [1, 3])
def test_conv2d_gradients(k, rng):
    x, w, b = T(rng.normal(size=(2, 3, 5, 6))), T(rng.normal(size=(4, 3, k, k))), T(rng.normal(size=4))
    r = rng.normal(size=(2, 4, 5, 6))
    assert check_grads(lambda: ad.tsum(ad.conv2d(x, w, b) * r), [x, w, b]) < TOL


def test_conv2d_rejects_bad_shapes():
    with pytest.raises(ConfigurationError):
        ad.conv2d(ad.Tensor(np.zeros((1, 2, 4, 4))), ad.Tensor(np.zeros((3, 3, 3, 3))))
    with pytest.raises(ConfigurationError):
        ad.conv2d(ad.Tensor(np.zeros((1, 2, 4, 4))), ad.Tensor(np.zeros((3, 2, 2, 2))))


def test_two_layer_net_gradients(rng):
    # 7 -> 8 (3x3) -> 1 (1x1): 7*8*9 + 8 + 8 + 1 = 521 parameters
    x = ad.Tensor(rng.normal(size=(2, 7, 6, 6)))
    w1, b1 = T(rng.normal(size=(8, 7, 3, 3)) * 0.3), T(rng.normal(size=8) * 0.1)
    w2, b2 = T(rng.normal(size=(1, 8, 1, 1)) * 0.3), T(rng.normal(size=1) * 0.1)
    y = (rng.uniform(size=(2, 1, 6, 6)) > 0.5).astype(float)

    def build():
        h = ad.relu(ad.conv2d(x, w1, b1))
        return ad.mean(ad.bce_map(ad.sigmoid(ad.conv2d(h, w2, b2)), y))

    assert check_grads(build, [w1, b1, w2, b2]) < TOL


# losses and densities --------------------------------------------------------------------

def test_bce_values():
    p = ad.Tensor(np.array([0.5, 1.0, 0.0, 0.25]))
    y = np.array([1.0, 1.0, 0.0, 0.0])
    out = ad.bce_map(p, y).data
    assert out[0] == pytest.approx(math.log(2), abs=1e-12)
    assert out[1] == pytest.approx(1e-7, rel=1e-3)
    assert out[3] == pytest.approx(-math.log(0.75), abs=1e-12)


def test_bce_gradient_and_clamp(rng):
    p = T(rng.uniform(0.05, 0.95, size=(3, 3)))
    y = (rng.uniform(size=(3, 3)) > 0.5).astype(float)
    assert check_grads(lambda: ad.tsum(ad.bce_map(p, y)), [p]) < TOL
    # a saturated wrong prediction still gets a corrective (finite, signed) gradient
    q = T([1.0])
    with ad.Tape() as tape:
        loss = ad.tsum(ad.bce_map(q, np.array([0.0])))
    g = tape.backward(loss)[q]
    assert np.isfinite(g).all() and g[0] > 0


def test_bce_rejects_soft_targets():
    with pytest.raises(UsageError):
        ad.bce_map(ad.Tensor(np.array([0.3])), np.array([0.5]))


def test_log1m_tanh_sq_is_stable():
    u = np.array([-40.0, -3.0, 0.0, 2.5, 40.0])
    ref = np.log(1 - np.tanh(u[1:4]) ** 2)
    np.testing.assert_allclose(ad.log1m_tanh_sq(u)[1:4], ref, rtol=1e-12)
    assert np.isfinite(ad.log1m_tanh_sq(u)).all()
    assert ad.log1m_tanh_sq(np.array([40.0]))[0] == pytest.approx(2 * math.log(2) - 80, rel=1e-12)


def test_gaussian_logprob_symbolic_oracle():
    u_s, m_s, l_s = sympy.symbols("u m l", real=True)
    dens = -(u_s - m_s) ** 2 / (2 * sympy.exp(2 * l_s)) - l_s - sympy.log(2 * sympy.pi) / 2
    squashed = dens - sympy.log(1 - sympy.tanh(u_s) ** 2)
    vals = [(0.3, -0.2, -0.5), (-1.1, 0.4, 0.7), (0.0, 0.0, 0.0)]
    u, m, l = (np.array([v[i] for v in vals]).reshape(1, 3, 1, 1) for i in range(3))
    for expr, squash in ((dens, False), (squashed, True)):
        ref = sum(float(expr.subs({u_s: a, m_s: b, l_s: c})) for a, b, c in vals)
        got = ad.gaussian_logprob(u, m, l, squash=squash).data.item()
        assert got == pytest.approx(ref, abs=1e-12)
        for sym, arr in ((u_s, u), (m_s, m), (l_s, l)):
            d = sympy.diff(expr, sym)
            ref_g = np.array([float(d.subs({u_s: a, m_s: b, l_s: c})) for a, b, c in vals])
            tu, tm, tl = T(u), T(m), T(l)
            with ad.Tape() as tape:
                out = ad.tsum(ad.gaussian_logprob(tu, tm, tl, squash=squash))
            g = tape.backward(out)[{u_s: tu, m_s: tm, l_s: tl}[sym]]
            np.testing.assert_allclose(g.ravel(), ref_g, atol=1e-10)


def test_squash_correction_at_origin():
    z = np.zeros((1, 3, 1, 1))
    plain = ad.gaussian_logprob(z, z, z).data.item()
    squashed = ad.gaussian_logprob(z, z, z, squash=True).data.item()
    assert plain == pytest.approx(-1.5 * math.log(2 * math.pi), abs=1e-12)
    assert squashed == pytest.approx(plain, abs=1e-12)  # log(1 - tanh(0)^2) = 0


def test_gaussian_logprob_gradients(rng):
    u, m = T(rng.normal(size=(2, 3, 2, 2))), T(rng.normal(size=(2, 3, 2, 2)))
    ls = T(rng.uniform(-1, 1, size=(2, 3, 2, 2)))
    assert check_grads(lambda: ad.tsum(ad.gaussian_logprob(u, m, ls, squash=True)), [u, m, ls]) < TOL


def test_log_std_clamp_zeroes_gradient():
    u = ad.Tensor(np.zeros((1, 1, 1, 1)))
    ls = T(np.full((1, 1, 1, 1), 5.0))
    with ad.Tape() as tape:
        out = ad.tsum(ad.gaussian_logprob(u, u, ls))
    assert tape.backward(out)[ls].item() == 0.0
    assert out.data == pytest.approx(-ad.LOG_STD_MAX - 0.5 * math.log(2 * math.pi))


# tape semantics ---------------------------------------------------------------------

def test_no_tape_no_recording():
    x = T([1.0, 2.0])
    y = ad.tanh(x)
    assert not y.requires_grad


def test_unused_wrt_gets_zero_and_nonscalar_rejected():
    a, b = T([1.0, 2.0]), T([3.0])
    with ad.Tape() as tape:
        loss = ad.tsum(a * a)
    g = tape.backward(loss, wrt=[a, b])
    np.testing.assert_array_equal(g[a], [2.0, 4.0])
    np.testing.assert_array_equal(g[b], [0.0])
    with pytest.raises(UsageError):
        tape.backward(a * 2.0)


def test_nonfinite_raises_numeric_error():
    with pytest.raises(NumericError) as info:
        ad.log(ad.Tensor(np.array([-1.0])))
    assert info.value.primitive == "log"


def test_linearity_of_backward(rng):
    x = T(rng.normal(size=(3, 3)))
    with ad.Tape() as tape:
        l1 = ad.tsum(ad.sin(x) * 2.0)
        l2 = ad.tsum(ad.exp(x))
        both = l1 + l2
    g1, g2, g12 = tape.backward(l1)[x], tape.backward(l2)[x], tape.backward(both)[x]
    np.testing.assert_allclose(g12, g1 + g2, rtol=0, atol=1e-12)


def test_forward_backward_helpers():
    x = T([2.0])
    out, tape = ad.forward(lambda t: ad.tsum(t * t * t), x)
    assert ad.backward(tape, out)[x][0] == pytest.approx(12.0)
