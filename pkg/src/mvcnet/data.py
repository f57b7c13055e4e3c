"""Synthetic SPD datasets and the ``mvt-v1`` container.

Three generators mirror the three experiment shapes: 3x3 tensor-field
images with class-specific orientation patterns, 40-site tensor fields with
a scalar target, and SPD(4) descriptor sequences of a moving blob.

mvt-v1 layout (all integers and floats little-endian)::

    b"MVT1"
    u32 field count, then per field: u32 byte length + UTF-8 text
        kind, n, dims (comma separated), channels, count, task, seed,
        dataset spec (JSON)
    per sample: f64 target, f64 clean target, then the sample's points as
        f64 in (*dims, channels, n, n) row-major order
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import linalg
from .errors import ValidationError
from .layers import ManifoldImage, covariance_block
from .manifolds import Spd

MAGIC = b"MVT1"
TASKS = ("SpdImageClass", "SpdRegression", "SpdSequenceAngle")
DEFAULT_ANGLES = {2: (30.0, 60.0), 3: (10.0, 15.0, 20.0)}
TARGET_NOISE = 0.01


@dataclass
class DatasetSpec:
    task: str
    n_samples: int
    dims: tuple = (6, 6)
    sigma: float = 0.05
    classes: int = 2
    seed: int = 0
    angles: tuple | None = None
    speed: float = 0.25
    start_jitter: float = 0.0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.angles is not None:
            self.angles = tuple(float(a) for a in self.angles)

    def validate(self):
        if self.task not in TASKS:
            raise ValidationError(f"task: unknown task {self.task!r}; choose from {TASKS}")
        if not self.sigma >= 0 or not math.isfinite(self.sigma):
            raise ValidationError(f"sigma: noise level must be a finite value >= 0, got {self.sigma}")
        if self.task == "SpdRegression":
            if self.n_samples < 2:
                raise ValidationError("n_samples: need at least 2 samples")
        else:
            if self.classes < 2:
                raise ValidationError("classes: need at least 2 classes")
            if self.n_samples < 2 * self.classes:
                raise ValidationError(f"n_samples: need at least 2*classes = {2 * self.classes} samples")
        if not self.dims or any(d < 1 for d in self.dims):
            raise ValidationError(f"dims: grid sides must be >= 1, got {self.dims}")
        if self.task == "SpdSequenceAngle":
            angles = self.angle_set()
            if len(angles) != self.classes:
                raise ValidationError(f"angles: {len(angles)} angles for {self.classes} classes")
            if len(self.dims) != 1:
                raise ValidationError("dims: sequences have a single (frame) axis")
        if self.task == "SpdImageClass" and self.classes > len(PATTERNS):
            raise ValidationError(f"classes: at most {len(PATTERNS)} orientation patterns are defined")
        return self

    def angle_set(self):
        if self.angles is not None:
            return self.angles
        if self.classes not in DEFAULT_ANGLES:
            raise ValidationError(f"angles: no default angle set for {self.classes} classes")
        return DEFAULT_ANGLES[self.classes]

    def to_dict(self):
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["angles"] = None if self.angles is None else list(self.angles)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(eq=False)
class LabeledSample:
    image: ManifoldImage
    target: float
    clean_target: float


@dataclass(eq=False)
class Dataset:
    spec: DatasetSpec
    manifold: Spd
    images: np.ndarray
    targets: np.ndarray
    clean_targets: np.ndarray
    channels: int = 1
    reference: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.targets)

    @property
    def is_classification(self):
        return self.spec.task != "SpdRegression"

    @property
    def dims(self):
        return self.images.shape[1 : 1 + len(self.spec.dims)]

    def samples(self) -> list[LabeledSample]:
        nd = len(self.spec.dims)
        return [
            LabeledSample(ManifoldImage(self.manifold, img, nd), t, c)
            for img, t, c in zip(self.images, self.targets, self.clean_targets)
        ]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.spec, self.manifold, self.images[idx], self.targets[idx],
                       self.clean_targets[idx], self.channels, self.reference)

    def to_bytes(self) -> bytes:
        return dataset_bytes(self)

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


# orientation patterns: angle of the principal eigenvector at (row, col)


def _horizontal(r, c, cy, cx):
    return np.zeros_like(r)


def _radial(r, c, cy, cx):
    return np.arctan2(r - cy, c - cx)


def _circular(r, c, cy, cx):
    return np.arctan2(r - cy, c - cx) + np.pi / 2


def _vertical(r, c, cy, cx):
    return np.full_like(r, np.pi / 2)


def _diagonal(r, c, cy, cx):
    return np.full_like(r, np.pi / 4)


def _hyperbolic(r, c, cy, cx):
    return -np.arctan2(r - cy, c - cx)


PATTERNS = (_horizontal, _radial, _circular, _vertical, _diagonal, _hyperbolic)
EIGS = np.array([2.0, 0.6, 0.4])


def _rot_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    out = np.zeros(theta.shape + (3, 3))
    out[..., 0, 0], out[..., 0, 1] = c, -s
    out[..., 1, 0], out[..., 1, 1] = s, c
    out[..., 2, 2] = 1.0
    return out


def tensor_field(theta, eigs=EIGS):
    """3x3 SPD tensors with principal axis at in-plane angle ``theta``."""
    r = _rot_z(np.asarray(theta, dtype=np.float64))
    return linalg.symmetrize((r * eigs) @ np.swapaxes(r, -1, -2))


def class_template(k, dims):
    if len(dims) != 2:
        raise ValidationError("dims: image-class templates are 2-D")
    h, w = dims
    r, c = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    return tensor_field(PATTERNS[k](r, c, (h - 1) / 2, (w - 1) / 2))


def _perturb(m, rng, x, sigma):
    if sigma == 0:
        return x.copy()
    return linalg.symmetrize(m.exp(x, m.random_tangent(rng, x, sigma)))


def _balanced_labels(rng, n, classes):
    return rng.permutation(np.arange(n) % classes)


def gen_spd_image_class(spec: DatasetSpec) -> Dataset:
    spec.validate()
    if spec.task != "SpdImageClass":
        raise ValidationError("task: expected SpdImageClass")
    m = Spd(3)
    rng = np.random.default_rng(spec.seed)
    labels = _balanced_labels(rng, spec.n_samples, spec.classes)
    templates = np.stack([class_template(k, spec.dims) for k in range(spec.classes)])
    clean = templates[labels][:, :, :, None]  # channel axis
    images = _perturb(m, rng, clean, spec.sigma)
    y = labels.astype(np.float64)
    return Dataset(spec, m, images, y, y.copy(), 1)


REG_SITES = 40


def regression_reference(sites=REG_SITES):
    """Smooth reference field: principal axis turning through 90 degrees."""
    theta = np.linspace(0.0, np.pi / 2, sites)
    return tensor_field(theta, np.array([1.5, 0.8, 0.5]))


def regression_functional(images, reference):
    """Mean geodesic distance of each field to the reference field."""
    m = Spd(3)
    x = np.asarray(images)[..., 0, :, :]
    return m.dist(reference, x).mean(axis=-1)


def gen_spd_regression(spec: DatasetSpec) -> Dataset:
    """40-site fields perturbed from a reference with per-sample amplitude in [0, sigma]."""
    spec.validate()
    if spec.task != "SpdRegression":
        raise ValidationError("task: expected SpdRegression")
    sites = spec.dims[0] if len(spec.dims) == 1 else REG_SITES
    m = Spd(3)
    rng = np.random.default_rng(spec.seed)
    ref = regression_reference(sites)
    amp = rng.uniform(0.0, 1.0, size=spec.n_samples) * spec.sigma
    base = np.broadcast_to(ref, (spec.n_samples,) + ref.shape)
    if spec.sigma > 0:
        tangents = m.random_tangent(rng, base, 1.0) * amp[:, None, None, None]
        fields = linalg.symmetrize(m.exp(base, tangents))
    else:
        fields = base.copy()
    images = fields[:, :, None]
    clean = regression_functional(images, ref)
    noisy = clean + TARGET_NOISE * rng.standard_normal(spec.n_samples)
    return Dataset(spec, m, images, noisy, clean, 1, ref)


FRAME = 8
FEATURE_CHANNELS = 3
BLOB_WIDTH = 1.2
BLOB_AMP = 1.0
TEXTURE_AMP = 0.5
Y_RAMP = 6.0
_TEXTURE_SEED = 20200417


def _textures():
    rng = np.random.default_rng(_TEXTURE_SEED)
    t = rng.standard_normal((FEATURE_CHANNELS, FRAME, FRAME))
    t -= t.mean(axis=(1, 2), keepdims=True)
    t /= t.std(axis=(1, 2), keepdims=True)
    return TEXTURE_AMP * t


def blob_frames(angle_deg, frames, speed, start, rng=None, sigma=0.0):
    """Feature maps ``(frames, 3, 8, 8)`` of a Gaussian blob moving at ``angle_deg``.

    Channels: blob intensity, intensity times an x ramp, intensity times a
    much stronger y ramp, each over a fixed zero-mean texture.  The unequal
    ramps make the descriptor path's speed depend on the motion angle, which
    is what a congruence-invariant network can see.  Per-pixel jitter of std
    ``sigma`` is added when ``rng`` is given.
    """
    a = np.deg2rad(angle_deg)
    t = np.arange(frames, dtype=float)
    cx = start[0] + speed * t * np.cos(a)
    cy = start[1] + speed * t * np.sin(a)
    yy, xx = np.meshgrid(np.arange(FRAME, dtype=float), np.arange(FRAME, dtype=float), indexing="ij")
    d2 = (xx - cx[:, None, None]) ** 2 + (yy - cy[:, None, None]) ** 2
    g = BLOB_AMP * np.exp(-d2 / (2 * BLOB_WIDTH**2))
    ramp_x = (xx - 3.5) / 3.5
    ramp_y = Y_RAMP * (yy - 3.5) / 3.5
    f = np.stack([g, g * ramp_x, g * ramp_y], axis=1) + _textures()
    if rng is not None and sigma > 0:
        f = f + sigma * rng.standard_normal(f.shape)
    return f


def gen_spd_sequence_angle(spec: DatasetSpec) -> Dataset:
    spec.validate()
    if spec.task != "SpdSequenceAngle":
        raise ValidationError("task: expected SpdSequenceAngle")
    frames = spec.dims[0]
    angles = spec.angle_set()
    rng = np.random.default_rng(spec.seed)
    labels = _balanced_labels(rng, spec.n_samples, spec.classes)
    seqs = np.empty((spec.n_samples, frames, 1, FEATURE_CHANNELS + 1, FEATURE_CHANNELS + 1))
    for i, k in enumerate(labels):
        start = np.array([1.5, 1.5]) + spec.start_jitter * rng.uniform(-1, 1, size=2)
        f = blob_frames(angles[k], frames, spec.speed, start, rng, spec.sigma)
        seqs[i, :, 0] = covariance_block(f)
    y = labels.astype(np.float64)
    return Dataset(spec, Spd(FEATURE_CHANNELS + 1), seqs, y, y.copy(), 1)


GENERATORS = {
    "SpdImageClass": gen_spd_image_class,
    "SpdRegression": gen_spd_regression,
    "SpdSequenceAngle": gen_spd_sequence_angle,
}


def generate(spec: DatasetSpec) -> Dataset:
    spec.validate()
    return GENERATORS[spec.task](spec)


PRESETS = {
    "spd-class-small": DatasetSpec("SpdImageClass", 200, (6, 6), 0.05, 2, 7),
    "spd-regression": DatasetSpec("SpdRegression", 200, (REG_SITES,), 1.0, 1, 7),
    "spd-seq-30-60": DatasetSpec("SpdSequenceAngle", 200, (20,), 0.05, 2, 7, (30.0, 60.0)),
    "spd-seq-10-15": DatasetSpec("SpdSequenceAngle", 200, (20,), 0.05, 2, 7, (10.0, 15.0)),
    "spd-seq-10-15-20": DatasetSpec("SpdSequenceAngle", 300, (20,), 0.05, 3, 7, (10.0, 15.0, 20.0)),
}


def preset(name: str, **overrides) -> DatasetSpec:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValidationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    d = base.to_dict()
    d.update(overrides)
    return DatasetSpec.from_dict(d)


# mvt-v1 io -------------------------------------------------------------------------


def _field(text: str) -> bytes:
    b = text.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def dataset_bytes(ds: Dataset) -> bytes:
    dims = ds.images.shape[1 : 1 + len(ds.spec.dims)]
    fields = [
        ds.manifold.kind,
        str(ds.manifold.n),
        ",".join(str(d) for d in dims),
        str(ds.channels),
        str(len(ds)),
        ds.spec.task,
        str(ds.spec.seed),
        json.dumps(ds.spec.to_dict(), sort_keys=True, separators=(",", ":")),
    ]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(fields)))
    for f in fields:
        buf.write(_field(f))
    per = int(np.prod(ds.images.shape[1:]))
    body = np.empty((len(ds), 2 + per), dtype="<f8")
    body[:, 0] = ds.targets
    body[:, 1] = ds.clean_targets
    body[:, 2:] = ds.images.reshape(len(ds), per)
    buf.write(body.tobytes())
    return buf.getvalue()


def write_dataset(ds: Dataset, path) -> str:
    blob = dataset_bytes(ds)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def dataset_from_bytes(blob: bytes) -> Dataset:
    if blob[:4] != MAGIC:
        raise ValidationError(f"not an mvt-v1 file (magic {blob[:4]!r})")
    pos = 4
    (nf,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    fields = []
    for _ in range(nf):
        (ln,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        fields.append(blob[pos : pos + ln].decode("utf-8"))
        pos += ln
    kind, n, dims, channels, count = fields[0], int(fields[1]), fields[2], int(fields[3]), int(fields[4])
    if kind != "spd":
        raise ValidationError(f"unsupported manifold kind {kind!r} in dataset")
    dims = tuple(int(d) for d in dims.split(",")) if dims else ()
    spec = DatasetSpec.from_dict(json.loads(fields[7]))
    per = int(np.prod(dims)) * channels * n * n
    body = np.frombuffer(blob, dtype="<f8", offset=pos)
    if body.size != count * (2 + per):
        raise ValidationError(f"dataset body holds {body.size} values, expected {count * (2 + per)}")
    body = body.reshape(count, 2 + per).astype(np.float64)
    images = body[:, 2:].reshape((count,) + dims + (channels, n, n))
    ref = None
    if spec.task == "SpdRegression":
        ref = regression_reference(dims[0])
    return Dataset(spec, Spd(n), images, body[:, 0].copy(), body[:, 1].copy(), channels, ref)


def read_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())
