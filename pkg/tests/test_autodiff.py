import numpy as np
import pytest

from mvcnet import autodiff as ad
from mvcnet import linalg
from mvcnet.errors import ContractError, PoisonedGradientError
from mvcnet.manifolds import Spd
from mvcnet.network import build_network
from mvcnet.verify import finite_difference_check, two_layer_spec


def sym(rng, n):
    a = rng.standard_normal((n, n))
    return 0.5 * (a + a.T)


def spd(rng, n):
    return linalg.spd_expm(sym(rng, n))


def check_grad(build, params, eps=1e-6, tol=1e-5):
    """Compare tape gradients of ``build(tape, nodes)`` with central differences
    over every parameter coordinate."""
    tape = ad.Tape()
    nodes = {k: tape.param(k, v) for k, v in params.items()}
    grads = tape.backward(build(tape, nodes))
    worst = 0.0
    for name, value in params.items():
        for j in range(value.size):
            vals = []
            for s in (1, -1):
                p = {k: v.copy() for k, v in params.items()}
                p[name].reshape(-1)[j] += s * eps
                t = ad.Tape()
                vals.append(float(build(t, {k: t.param(k, v) for k, v in p.items()}).value))
            fd = (vals[0] - vals[1]) / (2 * eps)
            a = grads[name][j]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-4))
    assert worst < tol
    return grads


def test_add_forward():
    t = ad.Tape()
    x, y = t.param("x", [1.0, 2.0]), t.param("y", [3.0, 5.0])
    assert np.array_equal(ad.add(x, y).value, [4.0, 7.0])


def test_scale_seeds_factor():
    t = ad.Tape()
    x = t.param("x", [1.0, -1.0, 3.0])
    g = t.backward(ad.sum(ad.scale(2.0, x)))
    assert np.array_equal(g["x"], [2.0, 2.0, 2.0])


def test_trace_gradient_is_identity():
    t = ad.Tape()
    w = t.param("W", np.arange(9.0).reshape(3, 3))
    g = t.backward(ad.trace(w))
    assert np.array_equal(g["W"].reshape(3, 3), np.eye(3))


def test_distance_squared_stationary_at_zero():
    s = sym(np.random.default_rng(0), 3)
    t = ad.Tape()
    e = t.param("eps", 0.0)
    x = ad.eigfn(ad.mul(e, t.const(s)), "exp")
    d = ad.dist(t.const(np.eye(3)), x)
    g = t.backward(ad.mul(d, d))
    assert abs(g["eps"][0]) < 1e-12


def test_unregistered_primitive():
    t = ad.Tape()
    with pytest.raises(ContractError, match="unregistered"):
        t.record("conv_transpose", t.param("x", 1.0))


def test_non_scalar_loss():
    t = ad.Tape()
    x = t.param("x", [1.0, 2.0])
    with pytest.raises(ContractError, match="scalar"):
        t.backward(ad.scale(3.0, x))


def test_duplicate_param_and_foreign_node():
    t = ad.Tape()
    t.param("x", 1.0)
    with pytest.raises(ContractError):
        t.param("x", 2.0)
    other = ad.Tape().param("y", 1.0)
    with pytest.raises(ContractError):
        ad.add(t.params["x"], other)


def test_poisoned_gradient_names_node():
    t = ad.Tape()
    x = t.param("x", [1.0, 2.0])
    y = ad.mul(x, t.const([np.inf, 1.0]))
    with pytest.raises(PoisonedGradientError, match=r"node \d+ \(mul\)"):
        t.backward(ad.sum(y))


def test_eigfn_composite():
    rng = np.random.default_rng(1)
    a, h = spd(rng, 3), sym(rng, 3)

    def build(t, n):
        x = ad.eigfn(n["A"], "log")
        y = ad.eigfn(ad.matmul(x, t.const(h)), "identity")
        return ad.trace(ad.matmul(y, y))

    check_grad(build, {"A": a})


@pytest.mark.parametrize("fn", ["exp", "log", "sqrt", "invsqrt"])
def test_eigfn_each_function(fn):
    rng = np.random.default_rng(2)
    w = sym(rng, 3)

    def build(t, n):
        return ad.trace(ad.matmul(ad.eigfn(n["A"], fn), t.const(w)))

    check_grad(build, {"A": spd(rng, 3)})


def test_dist_node():
    rng = np.random.default_rng(3)
    check_grad(lambda t, n: ad.dist(n["A"], n["B"]), {"A": spd(rng, 3), "B": spd(rng, 3)})


def test_affine_relu_softmax_chain():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((5, 4))
    labels = np.array([0, 2, 1, 1, 0])

    def build(t, n):
        h = ad.relu(ad.affine(t.const(x), n["W1"], n["b1"]))
        return ad.softmax_xent(ad.affine(h, n["W2"], n["b2"]), labels)

    params = {"W1": rng.standard_normal((6, 4)), "b1": rng.standard_normal(6) + 0.5,
              "W2": rng.standard_normal((3, 6)), "b2": rng.standard_normal(3)}
    check_grad(build, params)


def test_clip_threshold_gradient():
    rng = np.random.default_rng(5)
    x = rng.standard_normal(20)

    def build(t, n):
        y = ad.clip(ad.mul(n["s"], t.const(x)), n["th"])
        return ad.sum(ad.mul(y, y))

    g = check_grad(build, {"s": np.array([1.3]), "th": np.array([0.2])})
    assert g["th"][0] == pytest.approx(2 * 0.2 * np.sum(1.3 * x <= 0.2))


def test_gather_einsum_reshape_mse():
    rng = np.random.default_rng(6)
    idx = np.array([[0, 1, 2], [1, 2, 3], [2, 3, 0]])

    def build(t, n):
        g = ad.gather(n["x"], idx, 0)  # (3, 3, 2)
        y = ad.einsum("skc,k->sc", g, n["w"])
        y = ad.reshape(y, (6,))
        return ad.mse(y, np.linspace(0, 1, 6))

    check_grad(build, {"x": rng.standard_normal((4, 2)), "w": rng.standard_normal(3)})


def test_frechet_mean_is_stop_gradient():
    rng = np.random.default_rng(7)
    m = Spd(3)
    t = ad.Tape()
    pts = t.param("P", m.random_point(rng, 0.5, size=(4,)))
    fm = ad.frechet_mean(pts, m)
    assert not fm.requires_grad
    assert np.allclose(fm.value, m.frechet_mean(pts.value))
    loss = ad.add(ad.trace(fm), ad.scale(0.0, ad.sum(pts)))
    g = t.backward(loss)
    assert np.array_equal(g["P"], np.zeros(4 * 9))


def test_backward_is_deterministic():
    rng = np.random.default_rng(8)
    a = spd(rng, 4)

    def run():
        t = ad.Tape()
        x = t.param("A", a)
        return t.backward(ad.trace(ad.eigfn(ad.matmul(x, x), "log")))["A"]

    assert np.array_equal(run(), run())


def test_two_layer_network_every_coordinate():
    net = build_network(two_layer_spec(), 0)
    rng = np.random.default_rng(9)
    m = net.spec.manifold_obj
    imgs = m.random_point(rng, 0.5, (3,) + net.spec.dims + (net.spec.channels,))
    y = np.arange(3) % net.spec.num_outputs
    rows = finite_difference_check(net, imgs, y)
    assert len(rows) == net.n_params
    assert max(r[4] for r in rows) < 1e-5


# --- GradBundle and Adam ---------------------------------------------------------------


def test_gradbundle_clip_and_reduce():
    a = ad.GradBundle({"w": np.array([3.0, 4.0]), "b": np.array([0.0])})
    assert a.global_norm() == 5.0
    c = a.clipped(1.0)
    assert c.global_norm() == pytest.approx(1.0)
    assert a.clipped(10.0) is a
    r = ad.GradBundle.reduce([a, a, a])
    assert np.array_equal(r["w"], [9.0, 12.0])
    assert list(r) == ["b", "w"]


def test_adam_zero_gradient():
    state = ad.AdamState()
    p = {"x": np.array([1.0, -2.0])}
    for _ in range(10):
        p = ad.sgd_adam_step(p, {"x": np.zeros(2)}, state)
    assert np.array_equal(p["x"], [1.0, -2.0])


def test_adam_constant_gradient_step():
    state = ad.AdamState()
    p = {"x": np.zeros(3)}
    g = {"x": np.array([2.0, -0.5, 1e-3])}
    for _ in range(2000):
        prev = p["x"].copy()
        p = ad.sgd_adam_step(p, g, state, lr=0.005)
    step = p["x"] - prev
    assert np.allclose(step, -0.005 * np.sign(g["x"]), rtol=1e-4)


def test_adam_quadratic_bowl():
    target = np.array([1.5, -0.25, 3.0])
    scales = np.array([1.0, 10.0, 0.1])
    state = ad.AdamState()
    p = {"x": np.zeros(3)}
    for step in range(5000):
        g = 2 * scales * (p["x"] - target)
        p = ad.sgd_adam_step(p, {"x": g}, state, lr=0.005)
    # closed-form minimum is the target itself
    assert np.max(np.abs(p["x"] - target)) < 1e-6, step


def test_softmax_normalized():
    z = np.random.default_rng(10).standard_normal((100, 7)) * 50
    s = ad.softmax(z)
    assert np.max(np.abs(s.sum(axis=-1) - 1)) <= 1e-12
