"""Executable property suites: geometry, layer equivariance, collapse, gradients.

Each property is evaluated over seeded random draws and reported with its
trial count, the largest residual seen and the tolerance.  A failing
property keeps the first offending draw as a witness.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .layers import (
    AnchorPolicy,
    ManifoldImage,
    MvcKernel,
    cascade_two_layers,
    collapse_two_layers,
    mvc_forward,
    mvfc_features,
    single_layer,
    trelu,
    trelu_points,
)
from .manifolds import IsometryAction, Manifold, Sphere, Spd, manifold_from
from .network import NetworkSpec, build_network, fc, mvc, mvfc, softmax
from .network import trelu as trelu_layer

ANCHORS = ("window_fm", "center", "global_fm")
FD_EPS = 1e-6
GRAD_REL_TOL = 1e-5
# Relative error denominator floor: below this gradient magnitude the
# central-difference round-off (~1e-10) dominates and absolute error is used.
GRAD_FLOOR = 1e-4


@dataclass
class PropertyResult:
    name: str
    manifold: str
    trials: int
    max_residual: float
    tolerance: float
    passed: bool
    seed: int
    witness: dict | None = None
    seconds: float = 0.0
    comparison: str = "<="

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name} [{self.manifold}] trials={self.trials} "
                f"max_residual={self.max_residual:.3e} {self.comparison} {self.tolerance:.1e} "
                f"({self.seconds:.2f}s)")

    def to_dict(self):
        d = dict(self.__dict__)
        if self.witness is not None:
            d["witness"] = {k: (np.asarray(v).tolist() if isinstance(v, np.ndarray) else v)
                            for k, v in self.witness.items()}
        return d


@dataclass
class Report:
    results: list[PropertyResult] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self):
        return [r for r in self.results if not r.passed]

    def get(self, name, manifold=None):
        for r in self.results:
            if r.name == name and (manifold is None or r.manifold == manifold):
                return r
        raise KeyError(name)

    def lines(self) -> list[str]:
        out = [f"WARNING {w}" for w in self.warnings]
        out += [r.line() for r in self.results]
        for r in self.failures():
            out.append(f"  witness for {r.name} (seed {r.seed}): {_fmt_witness(r.witness)}")
        n_fail = len(self.failures())
        out.append(f"{len(self.results) - n_fail}/{len(self.results)} properties passed")
        return out

    def extend(self, other: "Report"):
        self.results += other.results
        self.warnings += other.warnings
        return self


def _fmt_witness(w):
    if not w:
        return "-"
    with np.printoptions(precision=17, threshold=200):
        return "; ".join(f"{k}={np.asarray(v)!r}" if isinstance(v, np.ndarray) else f"{k}={v}" for k, v in w.items())


class _Check:
    """Accumulates residuals for one property; keeps the first failing witness."""

    def __init__(self, name, manifold, tol, seed):
        self.name, self.manifold, self.tol, self.seed = name, str(manifold), tol, seed
        self.trials = 0
        self.max = 0.0
        self.witness = None
        self.t0 = time.perf_counter()

    def add(self, residuals, witness=None):
        r = np.atleast_1d(np.asarray(residuals, dtype=np.float64))
        self.trials += r.size
        if r.size == 0:
            return
        bad = ~(r <= self.tol)
        worst = float(np.nanmax(np.where(np.isnan(r), np.inf, r)))
        self.max = max(self.max, worst)
        if bad.any() and self.witness is None:
            i = int(np.argmax(bad))
            self.witness = {"index": i, "residual": float(r[i])}
            if witness is not None:
                self.witness.update(witness(i) if callable(witness) else witness)

    def result(self) -> PropertyResult:
        return PropertyResult(self.name, self.manifold, self.trials, self.max, self.tol,
                              self.witness is None, self.seed, self.witness,
                              time.perf_counter() - self.t0)


def _tagged_rng(seed, tag: str):
    # stable across processes (no salted str hash)
    return np.random.default_rng([seed] + list(tag.encode()))


def _spread(m: Manifold):
    return 0.15 if isinstance(m, Sphere) else 0.5


def _rel(a, b, axes):
    num = np.linalg.norm(a - b, axis=axes)
    den = np.maximum(np.linalg.norm(b, axis=axes), 1e-300)
    return num / den


def _axes(m):
    return tuple(range(-m.point_ndim, 0))


# geometry -----------------------------------------------------------------------


def geometry_suite(m: Manifold, seed=0, trials=100) -> Report:
    rep = Report()
    rng = _tagged_rng(seed, "geometry")
    ax = _axes(m)
    sp = _spread(m) if isinstance(m, Sphere) else 1.0

    # Exp/Log round trips
    c = _Check("exp_log_roundtrip", m, 1e-9, seed)
    p = m.random_point(rng, sp, (trials,))
    v = m.random_tangent(rng, p, 1.0)
    back = m.log(p, m.exp(p, v))
    c.add(_rel(back, v, ax), lambda i: {"base": p[i], "v": v[i]})
    rep.results.append(c.result())

    c = _Check("log_exp_roundtrip", m, 1e-9, seed)
    q = m.random_point(rng, sp, (trials,))
    back = m.exp(p, m.log(p, q))
    c.add(_rel(back, q, ax), lambda i: {"base": p[i], "q": q[i]})
    rep.results.append(c.result())

    # metric axioms on trials * 100 triples
    k = trials * 100
    a, b, x = (m.random_point(rng, sp, (k,)) for _ in range(3))
    dab, dba, dbx, dax = m.dist(a, b), m.dist(b, a), m.dist(b, x), m.dist(a, x)
    slack = 1e-9
    c = _Check("metric_identity", m, slack, seed)
    c.add(m.dist(a, a), lambda i: {"a": a[i]})
    rep.results.append(c.result())
    c = _Check("metric_symmetry", m, slack, seed)
    c.add(np.abs(dab - dba), lambda i: {"a": a[i], "b": b[i]})
    rep.results.append(c.result())
    c = _Check("metric_triangle", m, slack, seed)
    c.add(np.maximum(dax - dab - dbx, 0.0), lambda i: {"a": a[i], "b": b[i], "c": x[i]})
    rep.results.append(c.result())
    c = _Check("metric_positivity", m, 0.0, seed)
    c.add(np.where(dab > 0, 0.0, 1.0), lambda i: {"a": a[i], "b": b[i]})
    rep.results.append(c.result())

    # inner product: symmetric, and |v|^2 equals squared distance to Exp
    c = _Check("inner_symmetry", m, 1e-12, seed)
    u = m.random_tangent(rng, p, 1.0)
    uv, vu = m.inner(p, u, v), m.inner(p, v, u)
    c.add(np.abs(uv - vu) / np.maximum(1.0, np.abs(uv)), lambda i: {"base": p[i], "u": u[i], "v": v[i]})
    rep.results.append(c.result())
    c = _Check("norm_matches_distance", m, 1e-9, seed)
    nv = m.norm(p, v)
    c.add(np.abs(m.dist(p, m.exp(p, v)) - nv) / np.maximum(nv, 1e-300), lambda i: {"base": p[i], "v": v[i]})
    rep.results.append(c.result())

    # FM first-order optimality and isometry equivariance
    c_opt = _Check("fm_optimality", m, 1e-10, seed)
    c_eq = _Check("fm_isometry_equivariance", m, 1e-8, seed)
    for t in range(trials):
        npts = int(rng.integers(2, 8))
        pts = m.random_point(rng, _spread(m), (npts,))
        w = rng.uniform(0.1, 1.0, npts)
        w /= w.sum()
        mu = m.frechet_mean(pts, w)
        g = m._wsum(w, m.log(mu[None], pts))
        c_opt.add(m.norm(mu, g), {"trial": t, "points": pts, "weights": w})
        phi = IsometryAction.random(m, rng)
        mu2 = m.frechet_mean(phi(pts), w)
        c_eq.add(m.dist(phi(mu), mu2), {"trial": t, "points": pts, "isometry": phi.matrix})
    rep.results += [c_opt.result(), c_eq.result()]

    # distance preserved by isometries
    c = _Check("isometry_preserves_distance", m, 1e-9, seed)
    phi = IsometryAction.random(m, rng)
    c.add(np.abs(m.dist(phi(a[:trials]), phi(b[:trials])) - dab[:trials]) / np.maximum(1.0, dab[:trials]),
          lambda i: {"a": a[i], "b": b[i], "isometry": phi.matrix})
    rep.results.append(c.result())

    if isinstance(m, Spd):
        rep.extend(matrix_function_suite(m.n, seed, trials))
    return rep


def matrix_function_suite(n=3, seed=0, trials=100) -> Report:
    """Daleckii-Krein derivative vs central differences, incl. clustered spectra."""
    rep = Report()
    rng = _tagged_rng(seed, "dsym")
    c = _Check("dsym_apply_vs_fd", f"Sym({n})", 1e-5, seed)
    draws = 2 * trials
    clustered = max(1, draws // 10) if draws else 0
    eps = 1e-6
    for t in range(draws):
        q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        lam = rng.uniform(0.5, 3.0, n)
        if t < clustered:
            lam[1] = lam[0] + 1e-9
        a = (q * lam) @ q.T
        a = linalg.symmetrize(a)
        h = linalg.symmetrize(rng.standard_normal((n, n)))
        fn = ("log", "exp", "sqrt", "invsqrt")[t % 4]
        d = linalg.sym_eig(a)
        an = linalg.dsym_apply(d, fn, h)
        fd = (linalg.eig_apply(a + eps * h, fn) - linalg.eig_apply(a - eps * h, fn)) / (2 * eps)
        err = np.linalg.norm(an - fd) / max(np.linalg.norm(fd), 1e-300)
        c.add(err, {"trial": t, "fn": fn, "a": a, "direction": h})
    rep.results.append(c.result())
    return rep


# layers -------------------------------------------------------------------------


def _random_image(m, rng, dims, channels):
    pts = m.random_point(rng, _spread(m), tuple(dims) + (channels,))
    return ManifoldImage(m, pts, len(dims))


def _random_kernel(rng, out_c, in_c, window, anchor):
    fan = in_c * int(np.prod(window))
    w = rng.uniform(-1, 1, size=(out_c, in_c) + tuple(window)) / math.sqrt(fan)
    return MvcKernel(w, AnchorPolicy(anchor))


def _skew(m, phi: IsometryAction, rng) -> IsometryAction:
    # deliberately broken action: perturb the matrix so it is no longer the same isometry
    bad = phi.matrix.copy()
    bad[..., 0] *= 1.05
    bad = bad + 0.02 * rng.standard_normal(bad.shape)
    return IsometryAction(m, bad)


def equivariance_suite(m: Manifold, seed=0, trials=100, inject_fault=False) -> Report:
    """mvc_forward(phi x) = phi mvc_forward(x) for every anchor policy."""
    rep = Report()
    for anchor in ANCHORS:
        rng = _tagged_rng(seed, "equivariance-" + anchor)
        c = _Check(f"range_equivariance[{anchor}]", m, 1e-7, seed)
        for t in range(trials):
            img = _random_image(m, rng, (5, 5), 2)
            ker = _random_kernel(rng, 2, 2, (3, 3), anchor)
            phi = IsometryAction.random(m, rng)
            out_phi = phi if not inject_fault else _skew(m, phi, rng)
            lhs = mvc_forward(img.map(phi), ker).data
            rhs = out_phi(mvc_forward(img, ker).data)
            d = float(np.max(m.dist(lhs, rhs)))
            c.add(d, {"trial": t, "anchor": anchor, "image": img.data, "weights": ker.weights,
                      "isometry": out_phi.matrix})
        rep.results.append(c.result())
    return rep


def shift_suite(m: Manifold, seed=0, trials=100, size=8) -> Report:
    """Periodic padding, stride 1: every cyclic shift commutes with mvc_forward."""
    rep = Report()
    if trials <= 0:
        return rep
    for anchor in ANCHORS:
        rng = _tagged_rng(seed, "shift-" + anchor)
        img = _random_image(m, rng, (size, size), 2)
        ker = _random_kernel(rng, 2, 2, (3, 3), anchor)
        base = mvc_forward(img, ker, padding="periodic")
        c = _Check(f"shift_equivariance[{anchor}]", m, 1e-9, seed)
        for dy in range(size):
            for dx in range(size):
                lhs = mvc_forward(img.shift((dy, dx)), ker, padding="periodic").data
                rhs = base.shift((dy, dx)).data
                c.add(float(np.max(m.dist(lhs, rhs))), {"shift": (dy, dx), "anchor": anchor})
        rep.results.append(c.result())
    return rep


def collapse_suite(m: Manifold, seed=0, trials=100) -> Report:
    """Two cascaded layers with one fixed anchor equal one layer; tReLU in between breaks it."""
    rep = Report()
    rng = _tagged_rng(seed, "collapse")
    draws = 2 * trials
    n = 4
    c = _Check("collapse_two_layers", m, 1e-8, seed)
    diffs = []
    for t in range(draws):
        anchor = m.random_point(rng, _spread(m))
        pts = m.random_point(rng, _spread(m), (2 * n,))
        w = rng.uniform(-1, 1, size=(2, n)) / n
        h = rng.uniform(-1, 1, size=2)
        fixed = AnchorPolicy.fixed(anchor)
        wt = collapse_two_layers(w, h, fixed, fixed)
        cas = cascade_two_layers(m, pts, w, h, anchor)
        one = single_layer(m, pts, wt, anchor)
        c.add(float(m.dist(cas, one)), {"trial": t, "anchor": anchor, "points": pts, "w": w, "h": h})
        act = cascade_two_layers(m, pts, w, h, anchor, activation=lambda x: trelu_points(m, x))
        diffs.append(float(m.dist(act, one)))
    rep.results.append(c.result())
    if not isinstance(m, Spd):
        # On the sphere the canonical tReLU is the identity on a whole quadrant
        # of the tangent plane, so how often it bites depends on data placement.
        return rep
    diffs = np.array(diffs)
    frac_equal = float(np.mean(diffs <= 1e-3)) if draws else 0.0
    rep.results.append(PropertyResult(
        "collapse_negative_control_trelu", str(m), draws, frac_equal, 0.05, frac_equal <= 0.05, seed,
        None if frac_equal <= 0.05 else {"fraction_within_1e-3": frac_equal}, 0.0))
    return rep


def non_contraction_witness(m: Manifold, seed=0, weight=100.0):
    """Two 1-D images differing in one pixel whose MVC outputs are far further apart.

    Returns ``(ratio, witness dict)``; the ratio is output distance over
    input distance (max pixel distance in both cases).
    """
    rng = _tagged_rng(seed, "noncontraction")
    # pixels within ~0.01 of a common point keep 100 * Log well inside the chart
    center = m.random_point(rng, _spread(m))
    steps = m.random_tangent(rng, np.broadcast_to(center, (3, 1) + m.point_shape), 0.01)
    img = ManifoldImage(m, m.exp(np.broadcast_to(center, steps.shape), steps), 1)
    other = img.data.copy()
    tangent = m.random_tangent(rng, other[0, 0], 1.0)
    tangent = 0.01 * tangent / m.norm(other[0, 0], tangent)
    other[0, 0] = m.exp(other[0, 0], tangent)
    img2 = ManifoldImage(m, other, 1)
    w = np.zeros((1, 1, 3))
    w[0, 0, 0] = weight
    w[0, 0, 1] = 1.0
    ker = MvcKernel(w, AnchorPolicy("center"))
    d_in = float(np.max(m.dist(img.data, img2.data)))
    d_out = float(np.max(m.dist(mvc_forward(img, ker).data, mvc_forward(img2, ker).data)))
    return d_out / d_in, {"image_a": img.data, "image_b": img2.data, "weights": w, "anchor": "center",
                          "d_in": d_in, "d_out": d_out}


def misc_layer_suite(m: Manifold, seed=0, trials=100) -> Report:
    rep = Report()
    rng = _tagged_rng(seed, "misc")
    if trials <= 0:
        return rep
    t0 = time.perf_counter()
    ratio, wit = non_contraction_witness(m, seed)
    rep.results.append(PropertyResult("non_contraction_witness", str(m), 1, ratio, 10.0, ratio > 10.0, seed,
                                      None if ratio > 10 else wit, time.perf_counter() - t0, ">"))

    c = _Check("trelu_idempotence", m, 1e-10, seed)
    img = _random_image(m, rng, (trials,), 1)
    once = trelu(img)
    twice = trelu(once)
    c.add(m.dist(once.data, twice.data).reshape(-1), lambda i: {"pixel": img.data[i]})
    rep.results.append(c.result())

    c = _Check("mvfc_isometry_invariance", m, 1e-8, seed)
    for t in range(trials):
        pts = m.random_point(rng, _spread(m), (int(rng.integers(2, 9)),))
        phi = IsometryAction.random(m, rng)
        c.add(float(np.max(np.abs(mvfc_features(m, phi(pts)) - mvfc_features(m, pts)))),
              {"trial": t, "points": pts, "isometry": phi.matrix})
    rep.results.append(c.result())
    return rep


def softmax_suite(seed=0, trials=100) -> Report:
    rep = Report()
    if trials <= 0:
        return rep
    rng = _tagged_rng(seed, "softmax")
    spec = NetworkSpec({"kind": "spd", "n": 3}, (3, 3), 1, "classification",
                       [mvc(1, (3, 3), padding="periodic", anchor="center"), trelu_layer(), mvfc(),
                        fc(4, "relu"), fc(3), softmax()])
    net = build_network(spec, seed)
    imgs = Spd(3).random_point(rng, 1.0, (trials, 3, 3, 1))
    probs = net.predict(imgs)
    c = _Check("softmax_normalization", "Spd(3)", 1e-12, seed)
    c.add(np.abs(probs.sum(axis=-1) - 1.0), lambda i: {"image": imgs[i]})
    rep.results.append(c.result())
    return rep


# gradients ----------------------------------------------------------------------


def _grad_net_specs():
    spd = {"kind": "spd", "n": 3}
    head = [mvfc(), fc(3, "relu"), fc(2), softmax()]
    specs = {
        "mvc[center]": [mvc(2, (3, 3), padding="periodic", anchor="center"), trelu_layer()],
        "mvc[window_fm]": [mvc(2, (3, 3), padding="periodic", anchor="window_fm"), trelu_layer()],
        "mvc[global_fm]": [mvc(2, (3, 3), padding="periodic", anchor="global_fm"), trelu_layer()],
        "trelu[canonical]": [mvc(1, (3, 3), padding="periodic", anchor="center"),
                             trelu_layer("canonical", -0.05, learn_threshold=True)],
        "trelu[image_fm]": [mvc(1, (3, 3), padding="periodic", anchor="center"),
                            trelu_layer("image_fm", -0.05, learn_threshold=True)],
    }
    out = {k: (NetworkSpec(spd, (3, 3), 1, "classification", v + head), k.split("[")[0]) for k, v in specs.items()}
    out["mvfc+fc"] = (NetworkSpec(spd, (3, 3), 1, "classification", head), "fc")
    out["regression_head"] = (NetworkSpec(spd, (5,), 1, "regression",
                                          [mvc(1, (3,), anchor="center"), trelu_layer(), mvfc(), fc(3, "relu"), fc(1)]),
                               "fc")
    return out


def two_layer_spec():
    spd = {"kind": "spd", "n": 3}
    return NetworkSpec(spd, (4, 4), 1, "classification",
                       [mvc(2, (3, 3), padding="periodic", anchor="window_fm"), trelu_layer(),
                        mvc(1, (3, 3), padding="periodic", anchor="center"), trelu_layer(),
                        mvfc(), fc(3, "relu"), fc(2), softmax()])


def fd_rows(net, images, targets, picks, eps=FD_EPS):
    """Reverse-mode vs central differences at ``picks`` = [(param name, flat index)].

    Fréchet-mean anchors are stop-gradient, so the differenced loss reuses
    the anchors of the unperturbed pass.  Returns rows
    ``(name, index, analytic, numeric, relative error)``.
    """
    _, grads, _, anchors = net.loss_and_grad(images, targets)
    original = {k: v.copy() for k, v in net.params.items()}
    rows = []
    try:
        for name, j in picks:
            vals = []
            for sgn in (1.0, -1.0):
                p = original[name].copy().reshape(-1)
                p[j] += sgn * eps
                net.params[name] = p.reshape(original[name].shape)
                vals.append(net.loss_value(images, targets, anchors))
            net.params[name] = original[name]
            fd = (vals[0] - vals[1]) / (2 * eps)
            a = float(grads[name][j])
            rows.append((name, int(j), a, fd, abs(a - fd) / max(abs(a), abs(fd), GRAD_FLOOR)))
    finally:
        net.params = original
    return rows


def finite_difference_check(net, images, targets, names=None, coords=None, rng=None, eps=FD_EPS):
    """All coordinates of ``names`` (default every parameter), or ``coords`` random ones."""
    names = sorted(net.params) if names is None else list(names)
    picks = [(k, j) for k in names for j in range(net.params[k].size)]
    if coords is not None and len(picks) > coords:
        rng = np.random.default_rng() if rng is None else rng
        picks = [picks[i] for i in np.sort(rng.choice(len(picks), coords, replace=False))]
    return fd_rows(net, images, targets, picks, eps)


def _grad_inputs(spec, rng, batch=3):
    m = spec.manifold_obj
    imgs = m.random_point(rng, 0.5, (batch,) + spec.dims + (spec.channels,))
    if spec.task == "classification":
        y = np.arange(batch) % spec.num_outputs
    else:
        y = rng.uniform(0, 1, batch)
    return imgs, y


def _row_witness(rows):
    return lambda i: dict(zip(("param", "index", "analytic", "numeric"), rows[i][:4]))


def gradient_suite(seed=0, coords=50) -> Report:
    """Per layer type: ``coords`` random coordinates of each such layer; plus every
    coordinate of a two-layer network."""
    rep = Report()
    for label, (spec, layer_kind) in _grad_net_specs().items():
        rng = _tagged_rng(seed, "grad-" + label)
        net = build_network(spec, seed)
        imgs, y = _grad_inputs(spec, rng)
        c = _Check(f"grad_check[{label}]", "Spd(3)", GRAD_REL_TOL, seed)
        layers = sorted({k.split(".")[0] for k in net.params if f".{layer_kind}." in k})
        for prefix in layers:
            names = [k for k in sorted(net.params) if k.startswith(prefix + ".")]
            rows = finite_difference_check(net, imgs, y, names, coords, rng)
            c.add([r[4] for r in rows], _row_witness(rows))
        rep.results.append(c.result())
    rng = _tagged_rng(seed, "grad-two-layer")
    net = build_network(two_layer_spec(), seed)
    imgs, y = _grad_inputs(net.spec, rng)
    c = _Check("grad_check[two_layer_network]", "Spd(3)", GRAD_REL_TOL, seed)
    rows = finite_difference_check(net, imgs, y)
    c.add([r[4] for r in rows], _row_witness(rows))
    rep.results.append(c.result())
    return rep


# driver -------------------------------------------------------------------------


def run_verify(kind="spd", n=3, seed=0, trials=100, inject_fault=False, gradients=True) -> Report:
    """Full suite for one manifold; gradient checks run on SPD only."""
    m = manifold_from(kind, n)
    rep = Report()
    if trials <= 0:
        rep.warnings.append("trials = 0: no properties were exercised (vacuous pass)")
        return rep
    rep.extend(geometry_suite(m, seed, trials))
    rep.extend(equivariance_suite(m, seed, trials, inject_fault))
    rep.extend(shift_suite(m, seed, trials))
    rep.extend(collapse_suite(m, seed, trials))
    rep.extend(misc_layer_suite(m, seed, trials))
    if isinstance(m, Spd):
        rep.extend(softmax_suite(seed, trials))
        if gradients:
            rep.extend(gradient_suite(seed))
    return rep
