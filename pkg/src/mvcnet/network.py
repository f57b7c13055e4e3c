"""Declarative MVC-net stacks, their taped forward pass, and checkpoints.

A network is MVC/tReLU layers, then one MVFC layer, then Euclidean FC
layers, optionally closed by a softmax.  Training networks run on SPD
images; the forward pass records every matrix function on an
:class:`~mvcnet.autodiff.Tape` so weights get exact reverse-mode gradients.
Fréchet-mean anchors (window/global FM, image-FM tReLU base, the MVFC mean)
are stop-gradient nodes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import linalg
from .errors import CheckpointVersionError, ValidationError
from .layers import GLOBAL_FM_TOL, PADDING_MODES, TRELU_BASES, window_index
from .manifolds import Manifold, Spd, manifold_from

CKPT_VERSION = "mvcnet-ckpt-v1"


class SpecError(ValidationError):
    def __init__(self, index, message):
        super().__init__(f"layer {index}: {message}")
        self.index = index


@dataclass
class LayerSpec:
    type: str
    out_channels: int | None = None
    window: tuple | None = None
    stride: int | tuple = 1
    padding: str = "none"
    anchor: str = "window_fm"
    base: str = "canonical"
    threshold: float = 0.0
    out: int | None = None
    activation: str = "none"
    learn_threshold: bool = False

    def to_dict(self):
        keep = {
            "mvc": ("out_channels", "window", "stride", "padding", "anchor"),
            "trelu": ("base", "threshold", "learn_threshold"),
            "mvfc": (),
            "fc": ("out", "activation"),
            "softmax": (),
        }[self.type]
        d = {"type": self.type}
        for k in keep:
            v = getattr(self, k)
            d[k] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("window", "stride"):
            if isinstance(d.get(k), list):
                d[k] = tuple(d[k])
        return cls(**d)


def mvc(out_channels, window, stride=1, padding="none", anchor="window_fm"):
    return LayerSpec("mvc", out_channels=out_channels, window=tuple(np.atleast_1d(window).tolist()),
                     stride=stride, padding=padding, anchor=anchor)


def trelu(base="canonical", threshold=0.0, learn_threshold=False):
    return LayerSpec("trelu", base=base, threshold=threshold, learn_threshold=learn_threshold)


def mvfc():
    return LayerSpec("mvfc")


def fc(out, activation="none"):
    return LayerSpec("fc", out=out, activation=activation)


def softmax():
    return LayerSpec("softmax")


@dataclass
class NetworkSpec:
    manifold: dict
    dims: tuple
    channels: int
    task: str
    layers: list = field(default_factory=list)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.layers = [ly if isinstance(ly, LayerSpec) else LayerSpec.from_dict(ly) for ly in self.layers]

    @property
    def manifold_obj(self) -> Manifold:
        return manifold_from(self.manifold["kind"], self.manifold["n"])

    def to_dict(self):
        return {
            "manifold": dict(self.manifold),
            "dims": list(self.dims),
            "channels": self.channels,
            "task": self.task,
            "layers": [ly.to_dict() for ly in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["manifold"], tuple(d["dims"]), d["channels"], d["task"], d["layers"])

    def validate(self):
        """Check the MVC/tReLU -> MVFC -> FC (-> softmax) shape; returns per-layer output info."""
        if self.task not in ("classification", "regression"):
            raise ValidationError(f"unknown task {self.task!r}")
        m = self.manifold_obj
        if not isinstance(m, Spd):
            raise ValidationError("trainable networks are implemented for SPD images")
        kinds = [ly.type for ly in self.layers]
        for i, k in enumerate(kinds):
            if k not in ("mvc", "trelu", "mvfc", "fc", "softmax"):
                raise SpecError(i, f"unknown layer type {k!r}")
        if kinds.count("mvfc") != 1:
            idx = [i for i, k in enumerate(kinds) if k == "mvfc"]
            if not idx:
                # point at the slot where MVFC was expected
                idx = [0, next((i for i, k in enumerate(kinds) if k not in ("mvc", "trelu")), len(kinds))]
            raise SpecError(idx[1], "exactly one MVFC layer is required")
        pos = kinds.index("mvfc")
        for i, k in enumerate(kinds):
            if i < pos and k not in ("mvc", "trelu"):
                raise SpecError(i, f"{k} layer before MVFC")
            if i > pos and k in ("mvc", "trelu"):
                raise SpecError(i, f"{k} layer after MVFC")
        if "softmax" in kinds:
            j = kinds.index("softmax")
            if j != len(kinds) - 1:
                raise SpecError(j, "softmax must be the last layer")
            if self.task != "classification":
                raise SpecError(j, "softmax only for classification")
        dims, ch = self.dims, self.channels
        width = None
        shapes = []
        for i, ly in enumerate(self.layers):
            if ly.type == "mvc":
                if not ly.out_channels or ly.out_channels < 1:
                    raise SpecError(i, "out_channels must be >= 1")
                if ly.window is None or len(ly.window) != len(dims):
                    raise SpecError(i, f"window must have {len(dims)} sides")
                if any(w % 2 == 0 for w in ly.window):
                    raise SpecError(i, "window sides must be odd")
                if ly.padding not in PADDING_MODES:
                    raise SpecError(i, f"padding must be one of {PADDING_MODES}")
                if ly.anchor not in ("window_fm", "center", "global_fm"):
                    raise SpecError(i, f"anchor {ly.anchor!r} not trainable")
                try:
                    dims, _ = window_index(dims, ly.window, ly.stride, ly.padding)
                except ValidationError as exc:
                    raise SpecError(i, str(exc)) from None
                ch = ly.out_channels
            elif ly.type == "trelu":
                if ly.base not in TRELU_BASES:
                    raise SpecError(i, f"tReLU base must be one of {TRELU_BASES}")
            elif ly.type == "mvfc":
                width = int(np.prod(dims)) * ch
            elif ly.type == "fc":
                if not ly.out or ly.out < 1:
                    raise SpecError(i, "fc out must be >= 1")
                if ly.activation not in ("none", "relu"):
                    raise SpecError(i, "fc activation must be 'none' or 'relu'")
                width = ly.out
            shapes.append((dims, ch, width))
        if not kinds or kinds[-1] == "mvfc":
            raise SpecError(len(kinds), "at least one FC layer must follow MVFC")
        if self.task == "regression" and width != 1:
            raise SpecError(len(kinds) - 1, "regression head must have one output")
        return shapes

    @property
    def num_outputs(self):
        return [ly for ly in self.layers if ly.type == "fc"][-1].out


def _pname(i, kind, what):
    return f"L{i:02d}.{kind}.{what}"


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _tangent_clip(v, i, ly, pnodes):
    if ly.learn_threshold:
        return ad.clip(v, pnodes[_pname(i, "trelu", "threshold")])
    return ad.relu(v, ly.threshold)


class Network:
    def __init__(self, spec: NetworkSpec, params: dict, seed: int = 0):
        self.spec = spec
        self.shapes = spec.validate()
        self.manifold = spec.manifold_obj
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.seed = seed
        self._index_cache = {}

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def layer_param_counts(self) -> list[int]:
        counts = []
        for i, ly in enumerate(self.spec.layers):
            counts.append(sum(v.size for k, v in self.params.items() if k.startswith(f"L{i:02d}.")))
        return counts

    def _windows(self, i, dims, ly):
        key = (i, dims)
        if key not in self._index_cache:
            self._index_cache[key] = window_index(dims, ly.window, ly.stride, ly.padding)
        return self._index_cache[key]

    # taped forward ---------------------------------------------------------
    def forward_tape(self, tape: ad.Tape, images: np.ndarray, frozen: dict | None = None):
        """Record the forward pass for a batch ``(B, *dims, C, n, n)``.

        Returns ``(output node, anchors)``; ``anchors`` maps a key per
        stop-gradient anchor to the array used.  Passing it back as
        ``frozen`` replays the pass with those anchors held fixed.
        """
        spec = self.spec
        n = self.manifold.n
        images = np.asarray(images, dtype=np.float64)
        b = images.shape[0]
        dims = spec.dims
        ch = spec.channels
        if images.shape[1:] != dims + (ch, n, n):
            raise ValidationError(f"batch shape {images.shape[1:]} does not match network input {dims + (ch, n, n)}")
        pnodes = {name: tape.param(name, value) for name, value in sorted(self.params.items())}
        anchors = {}

        def anchor_value(key, compute):
            if frozen is not None and key in frozen:
                val = frozen[key]
            else:
                val = compute()
            anchors[key] = val
            return val

        x = tape.const(images.reshape((b, -1, ch, n, n)))
        feats = None
        for i, ly in enumerate(spec.layers):
            if ly.type == "mvc":
                out_dims, idx = self._windows(i, dims, ly)
                s, k = idx.shape
                xw = ad.gather(x, idx, axis=1)  # (B,S,K,C,n,n)
                if ly.anchor == "center":
                    mc = ad.gather(ad.gather(x, idx[:, k // 2], axis=1), 0, axis=2)
                    mh = ad.eigfn(mc, "sqrt")
                    mih = ad.eigfn(mc, "invsqrt")
                else:
                    if ly.anchor == "window_fm":
                        pts = xw.value.reshape((b, s, k * ch, n, n))
                        m = anchor_value(f"{i}.anchor", lambda: self.manifold.frechet_mean(pts))
                    else:
                        pts = x.value.reshape((b, -1, n, n))
                        m = anchor_value(f"{i}.anchor", lambda: np.broadcast_to(
                            self.manifold.frechet_mean(pts, tol=GLOBAL_FM_TOL)[:, None], (b, s, n, n)).copy())
                    mh_v, mih_v = linalg.sqrt_and_invsqrt(m)
                    mh, mih = tape.const(mh_v), tape.const(mih_v)
                mih_e = ad.reshape(mih, (b, s, 1, 1, n, n))
                y = ad.matmul(ad.matmul(mih_e, xw), mih_e)
                t = ad.eigfn(y, "log")
                w = ad.reshape(pnodes[_pname(i, "mvc", "weight")], (ly.out_channels, ch, k))
                comb = ad.einsum("bskcij,ock->bsoij", t, w)
                e = ad.eigfn(comb, "exp")
                mh_e = ad.reshape(mh, (b, s, 1, n, n))
                x = ad.matmul(ad.matmul(mh_e, e), mh_e)
                dims, ch = out_dims, ly.out_channels
            elif ly.type == "trelu":
                if ly.base == "canonical":
                    x = ad.eigfn(_tangent_clip(ad.eigfn(x, "log"), i, ly, pnodes), "exp")
                else:
                    pts = x.value.reshape((b, -1, n, n))
                    base = anchor_value(f"{i}.base", lambda: self.manifold.frechet_mean(pts))
                    bh_v, bih_v = linalg.sqrt_and_invsqrt(base.reshape(b, 1, 1, n, n))
                    bh, bih = tape.const(bh_v), tape.const(bih_v)
                    v = ad.matmul(ad.matmul(bh, ad.eigfn(ad.matmul(ad.matmul(bih, x), bih), "log")), bh)
                    v = _tangent_clip(v, i, ly, pnodes)
                    x = ad.matmul(ad.matmul(bh, ad.eigfn(ad.matmul(ad.matmul(bih, v), bih), "exp")), bh)
            elif ly.type == "mvfc":
                pts = ad.reshape(x, (b, -1, n, n))
                fm = anchor_value(f"{i}.fm", lambda: self.manifold.frechet_mean(pts.value))
                feats = ad.dist(tape.const(fm[:, None]), pts)
            elif ly.type == "fc":
                feats = ad.affine(feats, pnodes[_pname(i, "fc", "weight")], pnodes[_pname(i, "fc", "bias")])
                if ly.activation == "relu":
                    feats = ad.relu(feats)
        return feats, anchors

    def loss_tape(self, tape, images, targets, frozen=None):
        out, anchors = self.forward_tape(tape, images, frozen)
        if self.spec.task == "classification":
            loss = ad.softmax_xent(out, np.asarray(targets, dtype=np.int64))
        else:
            loss = ad.mse(ad.reshape(out, (out.shape[0],)), targets)
        return loss, out, anchors

    def loss_and_grad(self, images, targets, frozen=None):
        tape = ad.Tape()
        loss, out, anchors = self.loss_tape(tape, images, targets, frozen)
        return float(loss.value), tape.backward(loss), out.value, anchors

    def loss_value(self, images, targets, frozen=None) -> float:
        loss, _, _ = self.loss_tape(ad.Tape(), images, targets, frozen)
        return float(loss.value)

    def predict(self, images, batch_size=64) -> np.ndarray:
        """Class probabilities ``(B, classes)`` or regression outputs ``(B,)``."""
        images = np.asarray(images, dtype=np.float64)
        outs = []
        for start in range(0, images.shape[0], batch_size):
            tape = ad.Tape()
            out, _ = self.forward_tape(tape, images[start : start + batch_size])
            outs.append(out.value)
        out = np.concatenate(outs, axis=0)
        if self.spec.task == "classification":
            return ad.softmax(out)
        return out.reshape(-1)


def build_network(spec: NetworkSpec, seed: int = 0) -> Network:
    shapes = spec.validate()
    rng = np.random.default_rng(seed)
    params = {}
    ch = spec.channels
    width = None
    for i, ly in enumerate(spec.layers):
        if ly.type == "mvc":
            k = int(np.prod(ly.window))
            params[_pname(i, "mvc", "weight")] = _uniform(rng, ch * k, (ly.out_channels, ch) + tuple(ly.window))
            ch = ly.out_channels
        elif ly.type == "trelu" and ly.learn_threshold:
            params[_pname(i, "trelu", "threshold")] = np.array([float(ly.threshold)])
        elif ly.type == "mvfc":
            width = shapes[i][2]
        elif ly.type == "fc":
            params[_pname(i, "fc", "weight")] = _uniform(rng, width, (ly.out, width))
            params[_pname(i, "fc", "bias")] = _uniform(rng, width, (ly.out,))
            width = ly.out
    return Network(spec, params, seed)


def forward(network: Network, image) -> np.ndarray | float:
    """Single-image forward: probability vector or regression scalar."""
    data = getattr(image, "data", image)
    out = network.predict(np.asarray(data)[None])
    return out[0] if network.spec.task == "classification" else float(out[0])


def expected_param_count(spec: NetworkSpec) -> int:
    """Closed-form parameter count from the spec alone."""
    shapes = spec.validate()
    total, ch, width = 0, spec.channels, None
    for i, ly in enumerate(spec.layers):
        if ly.type == "mvc":
            total += ly.out_channels * ch * int(np.prod(ly.window))
            ch = ly.out_channels
        elif ly.type == "trelu" and ly.learn_threshold:
            total += 1
        elif ly.type == "mvfc":
            width = shapes[i][2]
        elif ly.type == "fc":
            total += ly.out * width + ly.out
            width = ly.out
    return total


# checkpoint -----------------------------------------------------------------------
#
# layout:  b"mvcnet-ckpt-v1\n"
#          u64 little-endian header length
#          header: compact JSON, sorted keys, UTF-8
#          parameters: float64 little-endian, concatenated in header order


def save_checkpoint(network: Network, path, extra: dict | None = None) -> bytes:
    blob = checkpoint_bytes(network, extra)
    Path(path).write_bytes(blob)
    return blob


def checkpoint_bytes(network: Network, extra: dict | None = None) -> bytes:
    entries = []
    offset = 0
    chunks = []
    for name in sorted(network.params):
        arr = np.ascontiguousarray(network.params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.tobytes())
    header = {
        "format": CKPT_VERSION,
        "seed": int(network.seed),
        "spec": network.spec.to_dict(),
        "params": entries,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return CKPT_VERSION.encode() + b"\n" + struct.pack("<Q", len(hb)) + hb + b"".join(chunks)


def load_checkpoint(path) -> tuple[Network, dict]:
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_from_bytes(blob: bytes) -> tuple[Network, dict]:
    nl = blob.find(b"\n")
    found = blob[:nl].decode("utf-8", "replace") if 0 <= nl < 64 else blob[:16].decode("utf-8", "replace")
    if found != CKPT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {found!r} does not match expected {CKPT_VERSION!r}")
    pos = nl + 1
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    header = json.loads(blob[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    data = np.frombuffer(blob[pos:], dtype="<f8")
    params = {}
    for e in header["params"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        params[e["name"]] = data[e["offset"] : e["offset"] + size].reshape(e["shape"]).astype(np.float64)
    spec = NetworkSpec.from_dict(header["spec"])
    return Network(spec, params, header["seed"]), header.get("extra", {})
