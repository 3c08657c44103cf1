"""Finite-difference verification of every differentiable building block.

:func:`run_suite` is what the ``grad-check`` command and the acceptance test
run; the toy configuration uses 16x16 images and a 40-vertex grid mesh.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import graph as gr
from . import losses, nets, render

STEP = 1e-5
TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    report: ad.GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def grid_mesh(rows: int = 5, cols: int = 8, spacing: float = 20.0):
    """Triangulated planar grid, vertices ``(rows*cols, 3)`` centered on the origin."""
    ys, xs = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    verts = np.stack([(xs - (cols - 1) / 2) * spacing, (ys - (rows - 1) / 2) * spacing, np.zeros_like(xs, float)], -1)
    faces = []
    for r in range(rows - 1):
        for c in range(cols - 1):
            a, b = r * cols + c, r * cols + c + 1
            d, e = a + cols, b + cols
            faces += [(a, b, e), (a, e, d)]
    return verts.reshape(-1, 3).astype(np.float64), np.array(faces, dtype=np.int64)


@dataclass(eq=False)
class Toy:
    verts: np.ndarray
    faces: np.ndarray
    hierarchy: gr.GraphHierarchy
    camera: render.Camera
    pme: nets.PME
    size: int = 16


def toy_setup(seed: int = 0) -> Toy:
    verts, faces = grid_mesh()
    h = gr.coarsen(gr.build_graph(faces, len(verts)), 3)
    cfg = nets.NetConfig(num_keypoints=3, width=4, mesh_widths=(8, 4, 4), pose_widths=(4, 4), pose_hidden=8, order=3, flow_mode="learned")
    pme = nets.PME(h, cfg, seed=seed)
    # zero biases put units fed by dead ReLUs exactly on a kink, where central
    # differences see half a slope; small offsets move them off it
    jitter = np.random.default_rng([seed, 1])
    for name, t in pme.named_parameters().items():
        if name.endswith("bias"):
            t.data += jitter.uniform(-0.1, 0.1, t.shape)
    cam = render.Camera(fx=40.0, fy=40.0, cx=8.0, cy=8.0, z_root=400.0)
    return Toy(verts, faces, h, cam, pme)


def _check(name, fn: Callable[[], ad.Tensor], tensor, results, max_elements=None, rng=None):
    rep = ad.check_gradient(fn, tensor, STEP, TOL, max_elements=max_elements, rng=rng)
    results.append(CheckResult(name, rep))


def _var(rng, *shape, scale=1.0, offset=0.0):
    return ad.Tensor(offset + scale * rng.standard_normal(shape), requires_grad=True)


def primitive_checks(trials: int = 3, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out: list[CheckResult] = []
    for t in range(trials):
        a, b = _var(rng, 3, 4), _var(rng, 3, 4)
        pos = ad.Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
        w = rng.standard_normal((3, 4))
        _check(f"add[{t}]", lambda: ad.sum(ad.add(a, b) * w), a, out)
        _check(f"sub[{t}]", lambda: ad.sum(ad.sub(a, b) * w), b, out)
        _check(f"mul[{t}]", lambda: ad.sum(ad.mul(a, b) * w), a, out)
        _check(f"div[{t}]", lambda: ad.sum(ad.div(a, pos) * w), pos, out)
        m1, m2 = _var(rng, 2, 3, 4), _var(rng, 4, 5)
        wm = rng.standard_normal((2, 3, 5))
        _check(f"matmul.lhs[{t}]", lambda: ad.sum(ad.matmul(m1, m2) * wm), m1, out)
        _check(f"matmul.rhs[{t}]", lambda: ad.sum(ad.matmul(m1, m2) * wm), m2, out)
        x = _var(rng, 2, 3, 6, 6)
        k = _var(rng, 4, 3, 3, 3)
        bias = _var(rng, 4)
        w1 = rng.standard_normal((2, 4, 6, 6))
        w2 = rng.standard_normal((2, 4, 3, 3))
        _check(f"conv2d.x[{t}]", lambda: ad.sum(ad.conv2d(x, k, bias, 1, 1) * w1), x, out)
        _check(f"conv2d.w[{t}]", lambda: ad.sum(ad.conv2d(x, k, bias, 1, 1) * w1), k, out)
        _check(f"conv2d.b[{t}]", lambda: ad.sum(ad.conv2d(x, k, bias, 1, 1) * w1), bias, out)
        _check(f"conv2d.stride2.x[{t}]", lambda: ad.sum(ad.conv2d(x, k, None, 2, 1) * w2), x, out)
        _check(f"conv2d.stride2.w[{t}]", lambda: ad.sum(ad.conv2d(x, k, None, 2, 1) * w2), k, out)
        wu = rng.standard_normal((2, 3, 12, 12))
        _check(f"upsample2d[{t}]", lambda: ad.sum(ad.upsample2d(x) * wu), x, out)
        wp = rng.standard_normal((2, 3, 3, 3))
        _check(f"maxpool2x2[{t}]", lambda: ad.sum(ad.maxpool2x2(x) * wp), x, out)
        _check(f"relu[{t}]", lambda: ad.sum(ad.relu(a) * w), a, out)
        _check(f"sigmoid[{t}]", lambda: ad.sum(ad.sigmoid(a) * w), a, out)
        _check(f"exp[{t}]", lambda: ad.sum(ad.exp(a) * w), a, out)
        _check(f"square[{t}]", lambda: ad.sum(ad.square(a) * w), a, out)
        _check(f"sqrt[{t}]", lambda: ad.sum(ad.sqrt(pos) * w), pos, out)
        ws = rng.standard_normal((2, 3, 6, 6))
        _check(f"spatial_softmax[{t}]", lambda: ad.sum(ad.spatial_softmax(x) * ws), x, out)
        wc = rng.standard_normal((3, 8))
        _check(f"concat[{t}]", lambda: ad.sum(ad.concat([a, b], axis=1) * wc), a, out)
        wst = rng.standard_normal((2, 3, 4))
        _check(f"stack[{t}]", lambda: ad.sum(ad.stack([a, b]) * wst), b, out)
        wr = rng.standard_normal((4, 3))
        _check(f"reshape[{t}]", lambda: ad.sum(ad.reshape(a, (4, 3)) * wr), a, out)
        _check(f"transpose[{t}]", lambda: ad.sum(ad.transpose(a) * wr), a, out)
        wsl = rng.standard_normal((3, 2))
        _check(f"slice[{t}]", lambda: ad.sum(ad.slice_axis(a, 1, 1, 3) * wsl), a, out)
        wmean = rng.standard_normal(3)
        _check(f"mean[{t}]", lambda: ad.sum(ad.mean(a, axis=1) * wmean), a, out)
        w4 = rng.standard_normal(4)
        _check(f"sum[{t}]", lambda: ad.sum(ad.sum(a, axis=0) * w4), a, out)
        _check(f"frobenius_sq[{t}]", lambda: ad.frobenius_sq(a), a, out)
    return out


def loss_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out: list[CheckResult] = []
    h = ad.Tensor(rng.uniform(0, 1, (3, 8, 8)), requires_grad=True)
    hg = rng.uniform(0, 1, (3, 8, 8))
    _check("heatmap_loss", lambda: losses.heatmap_loss(h, hg), h, out)
    s = ad.Tensor(rng.uniform(0, 1, (8, 8)), requires_grad=True)
    sg = (rng.uniform(0, 1, (8, 8)) > 0.5).astype(float)
    _check("silhouette_loss", lambda: losses.silhouette_loss(s, sg), s, out)
    pf = [ad.Tensor(rng.standard_normal((5, 3)), requires_grad=True) for _ in range(4)]
    pb = [ad.Tensor(rng.standard_normal((5, 3)), requires_grad=True) for _ in range(4)]
    for i in (0, 3):
        _check(f"temporal_pose_loss.fwd[{i}]", lambda: losses.temporal_pose_loss(pf, pb), pf[i], out)
        _check(f"temporal_pose_loss.bwd[{i}]", lambda: losses.temporal_pose_loss(pf, pb), pb[i], out)
    mf = [ad.Tensor(rng.standard_normal((2, 7, 3)), requires_grad=True) for _ in range(3)]
    mb = [ad.Tensor(rng.standard_normal((2, 7, 3)), requires_grad=True) for _ in range(3)]
    _check("temporal_mesh_loss.fwd", lambda: losses.temporal_mesh_loss(mf, mb), mf[1], out)
    _check("temporal_mesh_loss.bwd", lambda: losses.temporal_mesh_loss(mf, mb), mb[2], out)
    w = losses.LossWeights(0.1, 1.0, 10.0, 10.0)

    def combined():
        lc = losses.consistency_loss(w, losses.temporal_pose_loss(pf, pb), losses.temporal_mesh_loss(mf, mb))
        return losses.total_loss(w, losses.silhouette_loss(s, sg), losses.heatmap_loss(h, hg), lc)

    for name, t in (("h", h), ("s", s), ("p", pf[2]), ("m", mb[0])):
        _check(f"total_loss.{name}", combined, t, out)
    return out


def render_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out: list[CheckResult] = []
    v2 = ad.Tensor(np.array([[1.2, 1.4], [6.6, 1.1], [1.3, 6.7], [6.8, 6.4]]) + rng.uniform(-0.3, 0.3, (4, 2)), requires_grad=True)
    faces = np.array([[0, 1, 2], [1, 3, 2]])
    target = (rng.uniform(0, 1, (8, 8)) > 0.5).astype(float)
    _check("soft_silhouette.2tri", lambda: losses.silhouette_loss(render.soft_silhouette_2d(v2, faces, 8, 8, 1.0), target), v2, out)
    cam = render.Camera(40.0, 40.0, 8.0, 8.0, 400.0)
    pts = ad.Tensor(rng.uniform(-50, 50, (6, 3)), requires_grad=True)
    wp = rng.standard_normal((6, 2))
    _check("project", lambda: ad.sum(render.project(cam, pts) * wp), pts, out)
    verts, gf = grid_mesh(3, 3, 40.0)
    mesh = ad.Tensor(verts + rng.uniform(-5, 5, verts.shape), requires_grad=True)
    sil_t = (rng.uniform(0, 1, (16, 16)) > 0.5).astype(float)
    _check("rasterize_silhouette", lambda: losses.silhouette_loss(render.rasterize_silhouette(cam, mesh, gf, 16, 16, 1.0), sil_t), mesh, out)
    return out


def graph_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out: list[CheckResult] = []
    verts, faces = grid_mesh()
    h = gr.coarsen(gr.build_graph(faces, len(verts)), 2)
    layer = nets.ChebConv(rng, h.laplacians[0], 3, 4, 5)
    x = ad.Tensor(rng.standard_normal((2, 40, 4)), requires_grad=True)
    wt = rng.standard_normal((2, 40, 5))
    _check("chebconv.x", lambda: ad.sum(layer(x) * wt), x, out)
    _check("chebconv.theta", lambda: ad.sum(layer(x) * wt), layer.theta, out)
    _check("chebconv.bias", lambda: ad.sum(layer(x) * wt), layer.bias, out)
    xc = ad.Tensor(rng.standard_normal((h.sizes()[1], 3)), requires_grad=True)
    wu = rng.standard_normal((40, 3))
    _check("graph.upsample", lambda: ad.sum(gr.upsample(h, 1, xc) * wu), xc, out)
    xf = ad.Tensor(rng.standard_normal((40, 3)), requires_grad=True)
    wpool = rng.standard_normal((h.sizes()[1], 3))
    _check("graph.pool", lambda: ad.sum(gr.pool(h, 0, xf) * wpool), xf, out)
    return out


def pme_objective(toy: Toy, rng: np.random.Generator):
    """Scalar objective over a full estimator pass on a 16x16 frame pair."""
    s = toy.size
    k = toy.pme.config.num_keypoints
    img_a = rng.uniform(0, 1, (1, 3, s, s))
    img_b = rng.uniform(0, 1, (1, 3, s, s))
    prior = rng.uniform(0, 1, (1, k, s, s))
    # targets on the scale of the outputs keep the objective near 1, so
    # finite-difference roundoff stays below the smallest gradients
    h_gt = rng.uniform(0, 0.1, (1, k, s, s))
    s_gt = render.hard_silhouette(toy.camera, toy.verts, toy.faces, s, s)[None]
    p_gt = rng.standard_normal((1, k, 3)) * 20
    flow_gt = rng.standard_normal((1, 2, s, s)) * 0.1

    def objective():
        o = nets.pme_forward(toy.pme, img_a, img_b, prior)
        # decoder output starts within millimetres of the origin; offsetting the
        # grid keeps the rendered triangles well shaped
        sil = render.rasterize_silhouette(toy.camera, o.mesh + toy.verts, toy.faces, s, s, 1.0)
        lp = ad.mean(ad.square((o.pose - p_gt) * 0.01))
        lf = ad.mean(ad.square(o.flow - flow_gt))
        return losses.heatmap_loss(o.heatmaps, h_gt) + 0.1 * losses.silhouette_loss(sil, s_gt) + lp + lf

    return objective


def pme_checks(seed: int = 0, per_tensor: int = 4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    toy = toy_setup(seed)
    objective = pme_objective(toy, rng)
    out: list[CheckResult] = []
    for name, p in toy.pme.named_parameters().items():
        _check(f"pme.{name}", objective, p, out, max_elements=per_tensor, rng=np.random.default_rng(len(out)))
    return out


def rtm_objective(toy: Toy, rng: np.random.Generator, frames: int = 3):
    """Consistency loss between the forward and reversed sweeps over a random toy clip."""
    from .train import rtm_pass

    s = toy.size
    k = toy.pme.config.num_keypoints
    imgs = rng.uniform(0, 1, (1, frames, 3, s, s))
    w = losses.LossWeights(0.1, 1.0, 10.0, 10.0)

    def objective():
        res = rtm_pass(toy.pme, [], images=imgs)
        f, b = res["fwd"], res["bwd"]
        lp = losses.temporal_pose_loss([o.pose for o in f], [o.pose for o in b])
        lm = losses.temporal_mesh_loss([o.mesh for o in f], [o.mesh for o in b])
        return losses.consistency_loss(w, lp, lm)

    return objective


def rtm_checks(seed: int = 0, per_group: int = 3) -> list[CheckResult]:
    """Spot checks of the consistency gradient at each group's largest-gradient elements.

    Parameters that act alike on both sweeps get gradients that nearly
    cancel; relative error is meaningless there, so those are not sampled.
    """
    toy = toy_setup(seed)
    objective = rtm_objective(toy, np.random.default_rng([seed, 2]))
    params = toy.pme.named_parameters()
    for t in params.values():
        t.zero_grad()
    with ad.CompGraph() as g:
        loss = objective()
    g.backpropagate(loss)
    grads = {k: np.array(t.grad, copy=True) for k, t in params.items()}
    out: list[CheckResult] = []
    for group in ("flow", "heatmap", "mesh", "pose"):
        cands = [(abs(v), k, i) for k in params if k.startswith(group + ".") for i, v in enumerate(grads[k].reshape(-1))]
        for _, k, i in sorted(cands, reverse=True)[:per_group]:
            out.append(CheckResult(f"rtm.{k}[{i}]", _check_element(objective, params[k], i, grads[k].reshape(-1)[i])))
    return out


def _check_element(objective, tensor: ad.Tensor, index: int, analytic: float) -> ad.GradCheckReport:
    flat = tensor.data.reshape(-1)
    orig = flat[index]
    with ad.no_record():
        flat[index] = orig + STEP
        fp = objective().item()
        flat[index] = orig - STEP
        fm = objective().item()
    flat[index] = orig
    num = (fp - fm) / (2.0 * STEP)
    err = abs(analytic - num)
    rel = err / max(abs(analytic), abs(num), 1e-6)
    return ad.GradCheckReport(1, rel, err, TOL, bool(rel <= TOL), (index,))


def run_suite(trials: int = 3, seed: int = 0) -> list[CheckResult]:
    return (
        primitive_checks(trials, seed) + loss_checks(seed) + render_checks(seed)
        + graph_checks(seed) + pme_checks(seed) + rtm_checks(seed)
    )
