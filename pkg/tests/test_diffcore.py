import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbcritic import diffcore as dc
from helpers import central_diff, random_expr, rel_err


def test_evaluate_examples():
    x = dc.inp("x")
    assert dc.evaluate(x**2, {"x": 3.0}) == 9.0
    assert dc.evaluate(dc.tanh(x), {"x": 0.0}) == 0.0
    s, a, phi = dc.inp("s"), dc.inp("a"), dc.inp("phi")
    assert dc.evaluate((s + a) ** 2 * phi, {"s": -6.0, "a": 3.0, "phi": 0.25}) == 2.25


def test_unbound_input_raises_binding_error():
    x, y = dc.inp("x"), dc.inp("y")
    with pytest.raises(dc.BindingError, match="'y'"):
        dc.evaluate(x + y, {"x": 1.0})


def test_wrong_shape_binding():
    x = dc.inp("x", (3,))
    with pytest.raises(dc.BindingError):
        dc.evaluate(dc.sum_(x), {"x": np.zeros(2)})


def test_non_finite_reports_node():
    x = dc.inp("x")
    y = dc.log(x)
    with pytest.raises(dc.NumericError) as ei:
        dc.evaluate(y * 2.0, {"x": 0.0})
    assert ei.value.node is y
    assert "log" in str(ei.value)


def test_gradient_examples():
    x = dc.inp("x")
    assert dc.gradient(x**2, ["x"], {"x": 3.0})["x"] == 6.0
    s0, s1, th, phi = (dc.inp(n) for n in ("s0", "s1", "theta", "phi"))
    c = (s0 + th) ** 2 * phi + (s1 + th) ** 2 * phi
    b = {"s0": -6.0, "s1": -6.0, "theta": 0.0, "phi": 1.0}
    assert dc.gradient(c, ["theta"], b)["theta"] == -24.0
    # closed form 2 phi (s0 + s1 + 2 theta) at a second point
    b = {"s0": 1.5, "s1": -0.25, "theta": 0.75, "phi": -2.0}
    assert dc.gradient(c, ["theta"], b)["theta"] == pytest.approx(2 * -2.0 * (1.5 - 0.25 + 1.5), rel=1e-15)


def test_second_gradient_examples():
    x = dc.inp("x")
    assert dc.second_gradient(x**3, ["x"], ["x"], {"x": 2.0})["x"] == 12.0
    (d1,) = dc.grad(x**3, [x])
    (d2,) = dc.grad(d1, [x])
    assert dc.evaluate(d2, {"x": 2.0}) == 12.0


def test_toy_bilevel_hypergradient_matches_chain():
    s0, s1, th, phi, g = (dc.inp(n) for n in ("s0", "s1", "theta", "phi", "g"))
    c = (s0 + th) ** 2 * phi + (s1 + th) ** 2 * phi
    (dth,) = dc.grad(c, [th])
    th_new = th - 0.5 * dth
    s2 = s0 + 2.0 * th_new
    loss = (s2 - g) ** 2
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = dict(zip(("s0", "s1", "theta", "phi", "g"), rng.uniform(-3, 3, 5)))
        got = dc.gradient(loss, ["phi"], v)["phi"]
        s2v = v["s0"] + 2 * (v["theta"] - v["phi"] * (v["s0"] + v["s1"] + 2 * v["theta"]))
        want = 2 * (s2v - v["g"]) * (-2 * (v["s0"] + v["s1"] + 2 * v["theta"]))
        assert got == pytest.approx(want, rel=1e-13, abs=1e-13)


def test_first_order_fd_on_random_expressions():
    rng = np.random.default_rng(1)
    xs = [dc.inp(f"x{i}") for i in range(3)]
    worst = 0.0
    for _ in range(100):
        e = random_expr(rng, xs)
        v = rng.uniform(-2, 2, 3)
        names = [x.attr for x in xs]
        got = dc.gradient(e, names, dict(zip(names, v))).flat()
        prog = dc.Program([e])
        fd = central_diff(lambda p: prog(dict(zip(names, p)))[0], v)
        worst = max(worst, rel_err(got, fd))
    assert worst <= 1e-5


def test_second_order_fd_on_random_expressions():
    rng = np.random.default_rng(2)
    xs = [dc.inp(f"x{i}") for i in range(3)]
    names = [x.attr for x in xs]
    worst = 0.0
    for _ in range(100):
        e = random_expr(rng, xs)
        v = rng.uniform(-2, 2, 3)
        got = dc.second_gradient(e, names, names, dict(zip(names, v))).flat()
        g = dc.Program(dc.grad(e, xs))
        fd = central_diff(lambda p: sum(float(np.sum(t)) for t in g(dict(zip(names, p)))), v)
        worst = max(worst, rel_err(got, fd))
    assert worst <= 1e-4


def test_second_gradient_custom_contraction():
    x, y = dc.inp("x"), dc.inp("y")
    e = x**2 * y**3
    # d/dy of (d e / dx) = d/dy (2 x y^3) = 6 x y^2
    out = dc.second_gradient(e, ["y"], ["x"], {"x": 1.5, "y": -2.0})
    assert out["y"] == pytest.approx(6 * 1.5 * 4.0)
    out = dc.second_gradient(e, ["x"], ["x", "y"], {"x": 1.5, "y": -2.0},
                             contraction=lambda gs: gs[1])
    # d/dx (3 x^2 y^2) = 6 x y^2
    assert out["x"] == pytest.approx(6 * 1.5 * 4.0)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-1e3, 1e3), b=st.floats(-1e3, 1e3),
       x=st.floats(-2, 2), y=st.floats(-2, 2))
def test_linearity(a, b, x, y):
    u, w = dc.inp("u"), dc.inp("w")
    f = dc.tanh(u * w) + u**3
    g = dc.sin(u) * dc.exp(w)
    bind = {"u": x, "w": y}
    lhs = dc.gradient(a * f + b * g, ["u", "w"], bind).flat()
    rhs = a * dc.gradient(f, ["u", "w"], bind).flat() + b * dc.gradient(g, ["u", "w"], bind).flat()
    scale = max(1.0, float(np.max(np.abs(rhs))))
    assert np.max(np.abs(lhs - rhs)) <= 8 * np.finfo(float).eps * scale


def test_zero_dependence_is_exact():
    x, y = dc.inp("x"), dc.inp("y")
    e = dc.tanh(x) * 3.0
    gv = dc.gradient(e, ["x", "y", "z"], {"x": 0.3, "y": 1.0})
    assert len(gv) == 3
    assert gv["y"] == 0.0 and gv["z"] == 0.0
    # y referenced only through a stop-gradient path
    e2 = e + dc.stopgrad(y) * 2.0
    assert dc.gradient(e2, ["y"], {"x": 0.3, "y": 1.0})["y"] == 0.0


def test_subgradient_convention_at_zero():
    x = dc.inp("x")
    assert dc.gradient(dc.relu(x), ["x"], {"x": 0.0})["x"] == 0.0
    assert dc.gradient(dc.elu(x), ["x"], {"x": 0.0})["x"] == 1.0
    assert dc.gradient(dc.relu(x), ["x"], {"x": 1e-300})["x"] == 1.0
    assert dc.gradient(dc.elu(x), ["x"], {"x": -1.0})["x"] == pytest.approx(np.exp(-1.0))


def test_determinism_bit_identical():
    rng = np.random.default_rng(3)
    W = dc.inp("W", (5, 4))
    v = dc.inp("v", (4,))
    e = dc.sum_(dc.elu(dc.matmul(W, v)) ** 2)
    b = {"W": rng.standard_normal((5, 4)), "v": rng.standard_normal(4)}
    g1 = dc.gradient(e, ["W", "v"], b).flat()
    g2 = dc.gradient(e, ["W", "v"], b).flat()
    assert g1.tobytes() == g2.tobytes()
    assert np.float64(dc.evaluate(e, b)).tobytes() == np.float64(dc.evaluate(e, b)).tobytes()


def test_array_ops_match_numpy_and_fd():
    rng = np.random.default_rng(4)
    A = dc.inp("A", (3, 4))
    B = dc.inp("B", (4, 2))
    c = dc.inp("c", (2,))
    out = dc.tanh(A @ B + c)
    e = dc.sum_(dc.concat([out, out[:, :1] * 2.0], axis=-1) ** 2)
    b = {"A": rng.standard_normal((3, 4)), "B": rng.standard_normal((4, 2)), "c": rng.standard_normal(2)}
    ref = np.tanh(b["A"] @ b["B"] + b["c"])
    want = np.sum(np.concatenate([ref, 2 * ref[:, :1]], axis=-1) ** 2)
    assert dc.evaluate(e, b) == pytest.approx(want, rel=1e-14)
    prog = dc.Program([e])
    gv = dc.gradient(e, ["A", "B", "c"], b)
    for name in ("A", "B", "c"):
        fd = central_diff(lambda p: prog({**b, name: p})[0], b[name])
        assert rel_err(gv[name], fd) <= 1e-5


def test_node_cap():
    x = dc.inp("x")
    e = x
    for _ in range(50):
        e = dc.tanh(e)
    with pytest.raises(dc.GraphSizeError, match="cap"):
        dc.Program([e], cap=10)
    assert len(dc.Program([e])) == 51


def test_grad_requires_scalar():
    with pytest.raises(dc.ShapeError):
        dc.grad(dc.inp("v", (3,)), [dc.inp("v", (3,))])


def test_shape_errors():
    with pytest.raises(dc.ShapeError):
        dc.inp("a", (3,)) + dc.inp("b", (4,))
    with pytest.raises(dc.ShapeError):
        dc.matmul(dc.inp("a", (3, 2)), dc.inp("b", (3, 2)))
