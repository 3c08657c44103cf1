"""Pose-and-mesh estimator: flow, stacked-hourglass heatmaps, GCN mesh decoder, GCN pose head.

Images are NCHW, meshes ``(B, C, 3)`` and poses ``(B, K, 3)`` in wrist-relative
millimetres.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import graph as gr


class FlowLookupError(KeyError):
    """Oracle flow was requested for a frame pair it has not seen."""


class Module:
    """Holds named parameters and child modules in registration order."""

    def __init__(self):
        self._params: dict[str, ad.Tensor] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, data: np.ndarray) -> ad.Tensor:
        t = ad.Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, ad.Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for name, mod in self._children.items():
            out.update(mod.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self) -> list[ad.Tensor]:
        return list(self.named_parameters().values())


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv(Module):
    def __init__(self, rng, cin: int, cout: int, k: int = 3, stride: int = 1):
        super().__init__()
        self.stride, self.pad = stride, k // 2
        self.weight = self.param("weight", _uniform(rng, (cout, cin, k, k), cin * k * k))
        self.bias = self.param("bias", np.zeros(cout))

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.pad)


class Linear(Module):
    def __init__(self, rng, fin: int, fout: int, bias: bool = True):
        super().__init__()
        self.weight = self.param("weight", _uniform(rng, (fin, fout), fin))
        self.bias = self.param("bias", np.zeros(fout)) if bias else None

    def __call__(self, x):
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class ChebConv(Module):
    """Spectral filter ``sum_i T_i(L^) X theta_i + b``.

    The per-order scalars of the polynomial are folded into the matrices
    ``theta_i``; they are stored stacked as one ``((S+1) F_in, F_out)`` matrix.
    """

    def __init__(self, rng, lap: gr.Laplacian, order: int, fin: int, fout: int, bias: bool = True):
        super().__init__()
        self.lap, self.order, self.fin, self.fout = lap, order, fin, fout
        self.theta = self.param("theta", _uniform(rng, ((order + 1) * fin, fout), (order + 1) * fin))
        self.bias = self.param("bias", np.zeros(fout)) if bias else None

    def __call__(self, x):
        x = ad.as_tensor(x)
        if x.shape[-1] != self.fin:
            raise ad.ShapeError(f"ChebConv expects {self.fin} input features, got {x.shape}")
        basis = gr.chebyshev_propagate(self.lap, x, self.order)
        stacked = basis[0] if len(basis) == 1 else ad.concat(basis, axis=x.ndim - 1)
        y = ad.matmul(stacked, self.theta)
        return y if self.bias is None else y + self.bias


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """``(n_out, n_in)`` linear interpolation with half-pixel centers and edge clamping."""
    src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(x, height: int, width: int):
    x = ad.as_tensor(x)
    my = bilinear_matrix(height, x.shape[2])
    mx = bilinear_matrix(width, x.shape[3])
    return ad.matmul(ad.matmul(ad.Tensor(my), x), ad.Tensor(mx.T))


# ---------------------------------------------------------------------------
# heatmap estimator


class Hourglass(Module):
    """Encoder-decoder with two 2x downsamples, two upsamples and skip branches."""

    def __init__(self, rng, width: int):
        super().__init__()
        names = ("up1", "low1", "up2", "low2a", "low2b", "low3", "out")
        for n in names:
            setattr(self, n, self.child(n, Conv(rng, width, width)))

    def __call__(self, x):
        up1 = ad.relu(self.up1(x))
        low1 = ad.relu(self.low1(ad.maxpool2x2(x)))
        up2 = ad.relu(self.up2(low1))
        low2 = ad.relu(self.low2a(ad.maxpool2x2(low1)))
        low2 = ad.relu(self.low2b(low2))
        low3 = ad.relu(self.low3(ad.upsample2d(low2) + up2))
        return ad.relu(self.out(ad.upsample2d(low3) + up1))


HEAD_WEIGHT_SCALE = 0.1
HEAD_PRIOR_LOGIT = float(np.log(0.01 / 0.99))


class HeatmapNet(Module):
    """Two stacked hourglasses over the concatenated (frame, flow, previous heatmaps).

    Returns sigmoid heatmaps at input resolution and the final hourglass
    features ``F`` (working resolution, ``width`` channels).
    """

    def __init__(self, rng, num_keypoints: int = 21, width: int = 16, stem_pool: bool = True, flow_scale: float = 0.5):
        super().__init__()
        self.k, self.width, self.stem_pool, self.flow_scale = num_keypoints, width, stem_pool, flow_scale
        cin = 3 + 2 + num_keypoints
        self.stem = self.child("stem", Conv(rng, cin, width, 3, stride=2))
        self.stem2 = self.child("stem2", Conv(rng, width, width))
        self.hg1 = self.child("hg1", Hourglass(rng, width))
        self.head1 = self.child("head1", Conv(rng, width, num_keypoints, 1))
        self.remap_feat = self.child("remap_feat", Conv(rng, width, width, 1))
        self.remap_heat = self.child("remap_heat", Conv(rng, num_keypoints, width, 1))
        self.hg2 = self.child("hg2", Hourglass(rng, width))
        self.head2 = self.child("head2", Conv(rng, width, num_keypoints, 1))
        # small head weights and a sparse prior keep the sigmoid out of its
        # saturated-high regime, where a channel stops receiving gradient
        for head in (self.head1, self.head2):
            head.weight.data *= HEAD_WEIGHT_SCALE
            head.bias.data[:] = HEAD_PRIOR_LOGIT

    def __call__(self, image, flow, heat):
        image, flow, heat = ad.as_tensor(image), ad.as_tensor(flow), ad.as_tensor(heat)
        if not (image.shape[2:] == flow.shape[2:] == heat.shape[2:]):
            raise ad.ShapeError(f"inputs differ in size: {image.shape}, {flow.shape}, {heat.shape}")
        if image.shape[1] != 3 or flow.shape[1] != 2 or heat.shape[1] != self.k:
            raise ad.ShapeError(f"expected 3+2+{self.k} channels, got {image.shape[1]}+{flow.shape[1]}+{heat.shape[1]}")
        x = ad.concat([image, flow * self.flow_scale, heat], axis=1)
        if self.stem_pool:
            x = ad.maxpool2x2(x)
        x = ad.relu(self.stem(x))
        x = ad.relu(self.stem2(x))
        f1 = self.hg1(x)
        logits1 = self.head1(f1)
        x2 = x + self.remap_feat(f1) + self.remap_heat(logits1)
        feat = self.hg2(x2)
        logits = self.head2(feat)
        h, w = image.shape[2:]
        return ad.sigmoid(resize_bilinear(logits, h, w)), feat


# ---------------------------------------------------------------------------
# mesh decoder and pose head


MESH_OUTPUT_INIT = 0.01


class MeshDecoder(Module):
    """Image features -> coarsest-level vertex features -> upsample/ChebConv ladder -> vertices.

    Features are reduced by two stride-2 convolutions, globally average
    pooled, and linearly mapped to ``(C_coarsest, widths[0])``.  The final
    Chebyshev layer is linear without bias; its output is scaled by ``scale`` mm.
    """

    def __init__(self, rng, hierarchy: gr.GraphHierarchy, feat_channels: int, widths=(64, 32, 16), order: int = 3, scale: float = 100.0):
        super().__init__()
        levels = hierarchy.num_levels - 1
        if len(widths) != levels:
            raise ValueError(f"need {levels} widths for a {hierarchy.num_levels}-level hierarchy, got {widths}")
        self.h, self.scale, self.widths = hierarchy, scale, tuple(widths)
        self.down1 = self.child("down1", Conv(rng, feat_channels, 32, 3, stride=2))
        self.down2 = self.child("down2", Conv(rng, 32, 64, 3, stride=2))
        self.n_coarse = hierarchy.sizes()[-1]
        self.latent = self.child("latent", Linear(rng, 64, self.n_coarse * widths[0]))
        chans = list(widths) + [3]
        self.layers: list[ChebConv] = []
        for i in range(levels):
            level = levels - 1 - i
            last = i == levels - 1
            layer = ChebConv(rng, hierarchy.laplacians[level], order, chans[i], chans[i + 1], bias=not last)
            self.layers.append(self.child(f"cheb{i}", layer))
        # unnormalized image features would otherwise start vertices metres
        # away, some of them behind the camera
        self.final_layer.theta.data *= MESH_OUTPUT_INIT

    @property
    def final_layer(self) -> ChebConv:
        return self.layers[-1]

    def __call__(self, feat):
        feat = ad.as_tensor(feat)
        b = feat.shape[0]
        x = ad.relu(self.down1(feat))
        x = ad.relu(self.down2(x))
        z = ad.mean(x, axis=(2, 3))
        v = ad.relu(ad.reshape(self.latent(z), (b, self.n_coarse, self.widths[0])))
        level = self.h.num_levels - 1
        for i, layer in enumerate(self.layers):
            v = gr.upsample(self.h, level, v)
            level -= 1
            v = layer(v)
            if i < len(self.layers) - 1:
                v = ad.relu(v)
        return v * self.scale


class PoseHead(Module):
    """Two ChebConv+pool stages, each pooled level flattened, concatenated, then two FC layers."""

    def __init__(self, rng, hierarchy: gr.GraphHierarchy, num_keypoints: int = 21, widths=(8, 16), hidden: int = 64, order: int = 3, scale: float = 100.0):
        super().__init__()
        if hierarchy.num_levels < 3:
            raise ValueError("pose head needs at least two coarsening levels")
        self.h, self.k, self.scale = hierarchy, num_keypoints, scale
        sizes = hierarchy.sizes()
        self.gcn1 = self.child("gcn1", ChebConv(rng, hierarchy.laplacians[0], order, 3, widths[0]))
        self.gcn2 = self.child("gcn2", ChebConv(rng, hierarchy.laplacians[1], order, widths[0], widths[1]))
        flat = sizes[1] * widths[0] + sizes[2] * widths[1]
        self.fc1 = self.child("fc1", Linear(rng, flat, hidden))
        self.fc2 = self.child("fc2", Linear(rng, hidden, 3 * num_keypoints))

    def __call__(self, mesh):
        mesh = ad.as_tensor(mesh)
        if mesh.ndim != 3 or mesh.shape[1:] != (self.h.sizes()[0], 3):
            raise ad.ShapeError(f"pose head expects (B, {self.h.sizes()[0]}, 3) meshes, got {mesh.shape}")
        b = mesh.shape[0]
        x = mesh * (1.0 / self.scale)
        p1 = gr.pool(self.h, 0, ad.relu(self.gcn1(x)))
        p2 = gr.pool(self.h, 1, ad.relu(self.gcn2(p1)))
        flat = ad.concat([ad.reshape(p1, (b, -1)), ad.reshape(p2, (b, -1))], axis=1)
        out = self.fc2(ad.relu(self.fc1(flat)))
        return ad.reshape(out, (b, self.k, 3)) * self.scale


# ---------------------------------------------------------------------------
# flow


def frame_key(image: np.ndarray) -> bytes:
    """Hash of an image quantized to 8 bits; identifies frames for the oracle."""
    q = np.round(np.asarray(image, dtype=np.float64) * 255.0).astype(np.uint8)
    return hashlib.sha1(q.tobytes()).digest()


class FlowEstimator(Module):
    """Optical flow between two frames, ``(B, 2, H, W)`` in pixels per frame.

    ``oracle`` mode looks up generator flow for registered adjacent frame
    pairs (either order); ``learned`` mode runs a small encoder-decoder.
    """

    def __init__(self, rng=None, mode: str = "oracle", width: int = 16):
        super().__init__()
        if mode not in ("oracle", "learned"):
            raise ValueError(f"unknown flow mode {mode!r}")
        self.mode = mode
        self.table: dict[tuple[bytes, bytes], np.ndarray] = {}
        if mode == "learned":
            rng = rng if rng is not None else np.random.default_rng(0)
            self.enc1 = self.child("enc1", Conv(rng, 6, width))
            self.enc2 = self.child("enc2", Conv(rng, width, 2 * width, 3, stride=2))
            self.enc3 = self.child("enc3", Conv(rng, 2 * width, 2 * width, 3, stride=2))
            self.dec1 = self.child("dec1", Conv(rng, 2 * width, width))
            self.dec2 = self.child("dec2", Conv(rng, width + width, 2))

    def register(self, clip) -> None:
        imgs = clip.images()
        keys = [frame_key(im) for im in imgs]
        for i in range(clip.n):
            self.table[(keys[i], keys[i + 1])] = clip.flow_fwd[i]
            self.table[(keys[i + 1], keys[i])] = clip.flow_bwd[i]

    def __call__(self, img_a, img_b):
        img_a, img_b = ad.as_tensor(img_a), ad.as_tensor(img_b)
        if img_a.shape != img_b.shape:
            raise ad.ShapeError(f"frames differ in shape: {img_a.shape} vs {img_b.shape}")
        if self.mode == "oracle":
            return ad.Tensor(np.stack([self._lookup(a, b) for a, b in zip(img_a.data, img_b.data)]))
        x = ad.concat([img_a, img_b], axis=1)
        e1 = ad.relu(self.enc1(x))
        e2 = ad.relu(self.enc2(e1))
        e3 = ad.relu(self.enc3(e2))
        d1 = ad.relu(self.dec1(ad.upsample2d(e3)))
        return self.dec2(ad.concat([ad.upsample2d(d1), e1], axis=1)) * 2.0

    def _lookup(self, a, b):
        if np.array_equal(a, b):
            return np.zeros((2,) + a.shape[1:])
        try:
            return self.table[(frame_key(a), frame_key(b))]
        except KeyError:
            raise FlowLookupError("frame pair is not adjacent in any registered clip") from None


# ---------------------------------------------------------------------------
# the composed estimator


@dataclass
class PmeOutput:
    flow: ad.Tensor
    heatmaps: ad.Tensor
    features: ad.Tensor
    mesh: ad.Tensor | None
    pose: ad.Tensor | None


@dataclass(frozen=True)
class NetConfig:
    num_keypoints: int = 21
    width: int = 16
    stem_pool: bool = True
    mesh_widths: tuple = (64, 32, 16)
    pose_widths: tuple = (8, 16)
    pose_hidden: int = 64
    order: int = 3
    flow_mode: str = "oracle"


class PME(Module):
    """Flow -> heatmap -> mesh -> pose for one frame pair (batched)."""

    def __init__(self, hierarchy: gr.GraphHierarchy, config: NetConfig = NetConfig(), seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.config, self.hierarchy = config, hierarchy
        self.flow = self.child("flow", FlowEstimator(rng, config.flow_mode))
        self.heatmap = self.child("heatmap", HeatmapNet(rng, config.num_keypoints, config.width, config.stem_pool))
        self.mesh = self.child("mesh", MeshDecoder(rng, hierarchy, config.width, config.mesh_widths, config.order))
        self.pose = self.child("pose", PoseHead(rng, hierarchy, config.num_keypoints, config.pose_widths, config.pose_hidden, config.order))

    def group(self, name: str) -> dict[str, ad.Tensor]:
        return self._children[name].named_parameters(name + ".")

    def estimate(self, img_next, flow, heat_t, heads: str = "all") -> PmeOutput:
        """Everything downstream of the flow.  ``heads='heatmap'`` skips mesh and pose."""
        heat, feat = self.heatmap(img_next, flow, heat_t)
        if heads == "heatmap":
            return PmeOutput(ad.as_tensor(flow), heat, feat, None, None)
        mesh = self.mesh(feat)
        return PmeOutput(ad.as_tensor(flow), heat, feat, mesh, self.pose(mesh))

    def single_frame(self, img, prior, heads: str = "all") -> PmeOutput:
        """Estimate for a frame without a predecessor: the frame paired with itself."""
        return self(img, img, prior, heads)

    def __call__(self, img_t, img_next, heat_t, heads: str = "all") -> PmeOutput:
        return self.estimate(img_next, self.flow(img_t, img_next), heat_t, heads)


def pme_forward(nets: PME, img_t, img_next, heat_t) -> PmeOutput:
    return nets(img_t, img_next, heat_t)
