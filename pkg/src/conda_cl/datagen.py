"""Procedural street-scene domains and the stage-gated data vault.

Every domain shares one label layout model (seven super-classes) and differs
only photometrically: hue rotation, brightness, contrast, a multiplicative
sinusoidal texture and additive Gaussian noise.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AccessDenied, BadConfig, CorruptDataset, GenerationFailure
from .rng import Rng

CLASS_NAMES = ("flat", "constr", "object", "nature", "sky", "human", "vehicle")
FLAT, CONSTR, OBJECT, NATURE, SKY, HUMAN, VEHICLE = range(7)
N_CLASSES = len(CLASS_NAMES)

DEFAULT_PALETTE = (
    (128, 64, 128),   # flat
    (70, 70, 70),     # constr
    (250, 170, 30),   # object
    (107, 142, 35),   # nature
    (70, 130, 180),   # sky
    (220, 20, 60),    # human
    (0, 0, 142),      # vehicle
)

TEXTURE_AMPLITUDE = 0.2
MIN_CLASS_FRACTION = 0.01
MAX_RESAMPLES = 1000


@dataclass
class DomainSpec:
    name: str
    palette: tuple = DEFAULT_PALETTE
    hue_rotation: float = 0.0
    brightness: float = 1.0
    contrast: float = 1.0
    noise_sigma: float = 0.0
    texture_freq: float = 0.0

    def __post_init__(self):
        self.palette = tuple(tuple(int(c) for c in rgb) for rgb in self.palette)
        if len(self.palette) != N_CLASSES or any(len(c) != 3 for c in self.palette):
            raise BadConfig(f"palette must hold {N_CLASSES} RGB triples")
        if self.brightness <= 0 or self.contrast <= 0:
            raise BadConfig("brightness and contrast must be positive")
        if self.noise_sigma < 0:
            raise BadConfig("noise_sigma must be nonnegative")


@dataclass
class SceneSpec:
    """Canvas size and per-scene shape count ranges (inclusive)."""

    height: int = 32
    width: int = 32
    nature: tuple = (1, 3)
    constr: tuple = (1, 3)
    vehicle: tuple = (1, 2)
    human: tuple = (1, 2)
    object: tuple = (1, 3)

    @classmethod
    def empty(cls, height=32, width=32):
        return cls(height, width, (0, 0), (0, 0), (0, 0), (0, 0), (0, 0))


def default_domains():
    """Source plus three targets with monotonically growing appearance shift."""
    return [
        DomainSpec("source"),
        DomainSpec("target1", hue_rotation=25, brightness=0.9, contrast=0.9,
                   noise_sigma=0.02, texture_freq=1.0),
        DomainSpec("target2", hue_rotation=50, brightness=0.8, contrast=0.8,
                   noise_sigma=0.05, texture_freq=2.0),
        DomainSpec("target3", hue_rotation=75, brightness=0.7, contrast=0.7,
                   noise_sigma=0.08, texture_freq=3.0),
    ]


# --------------------------------------------------------------- rendering

def _count(rng, bounds):
    lo, hi = bounds
    return rng.integers(lo, hi + 1) if hi > lo else lo


def _hue_matrix(degrees):
    # rotation about the grey axis in RGB space
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    k = 1.0 / 3.0
    r = np.sqrt(k)
    return np.array([
        [c + (1 - c) * k, k * (1 - c) - r * s, k * (1 - c) + r * s],
        [k * (1 - c) + r * s, c + k * (1 - c), k * (1 - c) - r * s],
        [k * (1 - c) - r * s, k * (1 - c) + r * s, c + k * (1 - c)],
    ])


def render_labels(scene: SceneSpec, rng: Rng) -> np.ndarray:
    h, w = scene.height, scene.width
    yy, xx = np.mgrid[0:h, 0:w]
    labels = np.full((h, w), FLAT, dtype=np.uint8)
    horizon = int(h * rng.uniform((1,), 0.35, 0.55)[0])
    labels[:horizon] = SKY

    for _ in range(_count(rng, scene.nature)):
        cx, cy = rng.uniform((2,)) * (w, 0.3 * h) + (0, horizon - 0.2 * h)
        mask = np.zeros((h, w), dtype=bool)
        for _ in range(3):
            ox, oy = rng.uniform((2,), -0.08 * w, 0.08 * w)
            r = rng.uniform((1,), 0.06 * w, 0.14 * w)[0]
            mask |= (xx - cx - ox) ** 2 + (yy - cy - oy) ** 2 <= r * r
        labels[mask] = NATURE

    for _ in range(_count(rng, scene.constr)):
        bw = rng.integers(max(3, w // 8), max(4, w // 3))
        bh = rng.integers(max(3, h // 6), max(4, h // 2))
        x0 = rng.integers(0, w - bw + 1)
        bottom = min(h, horizon + rng.integers(0, max(1, h // 8)))
        labels[max(0, bottom - bh):bottom, x0:x0 + bw] = CONSTR

    for _ in range(_count(rng, scene.vehicle)):
        vw = rng.integers(max(4, w // 6), max(5, w // 3))
        vh = rng.integers(max(3, h // 10), max(4, h // 6))
        x0 = rng.integers(0, w - vw + 1)
        y0 = rng.integers(horizon, max(horizon + 1, h - vh))
        box = (xx >= x0) & (xx < x0 + vw) & (yy >= y0) & (yy < y0 + vh)
        # rounded corners
        for cx, cy in ((x0, y0), (x0 + vw - 1, y0), (x0, y0 + vh - 1), (x0 + vw - 1, y0 + vh - 1)):
            box[cy, cx] = False
        labels[box] = VEHICLE

    for _ in range(_count(rng, scene.human)):
        ph = rng.integers(max(4, h // 6), max(5, h // 3))
        x0 = rng.integers(0, w - 1)
        y0 = rng.integers(max(0, horizon - ph // 2), max(1, h - ph))
        cx = x0 + 0.5
        top, bot = y0 + 0.5, y0 + ph - 0.5
        # capsule: distance to a vertical segment
        dy = np.clip(yy, top, bot) - yy
        mask = (xx - cx) ** 2 + dy ** 2 <= 1.0
        labels[mask] = HUMAN

    for _ in range(_count(rng, scene.object)):
        cx = rng.uniform((1,), 0, w)[0]
        cy = rng.uniform((1,), horizon * 0.5, h)[0]
        r = rng.uniform((1,), 1.0, 2.2)[0]
        labels[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] = OBJECT
    return labels


def render_scene(scene: SceneSpec, domain: DomainSpec, rng: Rng):
    """Returns ``(image u8 3 x H x W, labels u8 H x W)``."""
    labels = render_labels(scene, rng)
    h, w = labels.shape
    palette = np.asarray(domain.palette, dtype=np.float64) / 255.0
    img = palette[labels]  # h w 3
    if domain.hue_rotation:
        img = img @ _hue_matrix(domain.hue_rotation).T
    if domain.brightness != 1.0:
        img = img * domain.brightness
    if domain.contrast != 1.0:
        img = (img - 0.5) * domain.contrast + 0.5
    if domain.texture_freq:
        phi, phase = rng.uniform((2,), 0.0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        wave = np.sin(2 * np.pi * domain.texture_freq * (xx * np.cos(phi) + yy * np.sin(phi)) / w + phase)
        img = img * (1.0 + TEXTURE_AMPLITUDE * wave)[:, :, None]
    if domain.noise_sigma:
        img = img + domain.noise_sigma * rng.normal((h, w, 3))
    img = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(img.transpose(2, 0, 1)), labels


# ---------------------------------------------------------------- datasets

@dataclass
class DomainDataset:
    images: np.ndarray          # N x 3 x H x W uint8
    labels: np.ndarray | None   # N x H x W uint8
    domain: str
    split: str
    seed: int = 0
    n_classes: int = N_CLASSES

    def __len__(self):
        return len(self.images)

    def float_images(self, idx=slice(None)):
        return self.images[idx].astype(np.float64) / 255.0


def class_fractions(labels, n_classes=N_CLASSES):
    counts = np.bincount(np.asarray(labels).ravel(), minlength=n_classes)[:n_classes]
    return counts / max(counts.sum(), 1)


def _render_range(spec, scene, rng, start, n, attempt):
    images = np.empty((n, 3, scene.height, scene.width), dtype=np.uint8)
    labels = np.empty((n, scene.height, scene.width), dtype=np.uint8)
    for i in range(n):
        images[i], labels[i] = render_scene(scene, spec, rng.child(start + i).child(attempt))
    return images, labels


def generate_domain(spec: DomainSpec, n_train: int, n_val: int, seed: int,
                    scene: SceneSpec | None = None):
    """Returns ``(train, val)``.

    Sample ``i`` of the train split draws from child stream ``i``; validation
    samples use indices ``n_train .. n_train + n_val - 1``. If the train split
    misses the per-class coverage floor the whole split is redrawn with the
    next attempt index.
    """
    if n_train < 1 or n_val < 1:
        raise BadConfig("dataset sizes must be at least 1")
    scene = scene or SceneSpec()
    rng = Rng(seed)
    for attempt in range(MAX_RESAMPLES):
        images, labels = _render_range(spec, scene, rng, 0, n_train, attempt)
        if class_fractions(labels).min() >= MIN_CLASS_FRACTION:
            break
    else:
        raise GenerationFailure(f"class coverage unreachable for domain {spec.name!r}")
    val_images, val_labels = _render_range(spec, scene, rng, n_train, n_val, 0)
    return (DomainDataset(images, labels, spec.name, "train", seed),
            DomainDataset(val_images, val_labels, spec.name, "val", seed))


DATASET_MAGIC = b"CDSD"


def save_dataset(path, ds: DomainDataset):
    n, c, h, w = ds.images.shape
    has_labels = ds.labels is not None
    parts = [DATASET_MAGIC, struct.pack("<IIHHBBB", 1, n, h, w, c, ds.n_classes, int(has_labels))]
    hwc = ds.images.transpose(0, 2, 3, 1)
    for i in range(n):
        parts.append(np.ascontiguousarray(hwc[i]).tobytes())
        if has_labels:
            parts.append(np.ascontiguousarray(ds.labels[i], dtype=np.uint8).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_dataset(path, domain="", split="", seed=0) -> DomainDataset:
    buf = Path(path).read_bytes()
    head = struct.calcsize("<IIHHBBB")
    if len(buf) < 4 + head or buf[:4] != DATASET_MAGIC:
        raise CorruptDataset(f"{path}: bad magic or truncated header")
    version, n, h, w, c, n_classes, has_labels = struct.unpack("<IIHHBBB", buf[4:4 + head])
    if version != 1:
        raise CorruptDataset(f"{path}: unsupported version {version}")
    if c != 3 or has_labels not in (0, 1):
        raise CorruptDataset(f"{path}: bad header fields")
    rec = h * w * c + (h * w if has_labels else 0)
    payload = buf[4 + head:]
    if len(payload) != n * rec:
        raise CorruptDataset(f"{path}: payload is {len(payload)} bytes, header implies {n * rec}")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(n, rec)
    images = raw[:, :h * w * c].reshape(n, h, w, c).transpose(0, 3, 1, 2).copy()
    labels = raw[:, h * w * c:].reshape(n, h, w).copy() if has_labels else None
    return DomainDataset(images, labels, domain, split, seed, n_classes)


# ------------------------------------------------------------------- vault

@dataclass
class TrainBatch:
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


@dataclass
class ImageBatch:
    """Target-domain training batch; carries no labels by construction."""

    images: np.ndarray
    indices: np.ndarray


@dataclass
class EvalBatch:
    images: np.ndarray
    labels: np.ndarray


@dataclass
class DataVault:
    """Stage-gated access to every domain's splits.

    Stage 0 permits training reads of the source domain only. Stage ``k >= 1``
    permits training reads of ``(targets[k-1], train)`` only, and those reads
    yield images without labels. Evaluation reads are always permitted. Every
    read is counted in ``audit``.
    """

    datasets: dict
    domains: list
    stage: int = 0
    audit: dict = field(default_factory=dict)
    transitions: list = field(default_factory=list)

    @property
    def source(self):
        return self.domains[0]

    @property
    def targets(self):
        return self.domains[1:]

    def advance(self):
        if self.stage >= len(self.targets):
            raise BadConfig(f"no target domain after stage {self.stage}")
        self.transitions.append((self.stage, self.stage + 1))
        self.stage += 1

    def _check_train(self, domain, split):
        if self.stage == 0:
            ok = domain == self.source
        else:
            ok = domain == self.targets[self.stage - 1] and split == "train"
        if not ok:
            raise AccessDenied(self.stage, domain, split)

    def _count(self, domain, split, purpose, n):
        key = (self.stage, domain, split, purpose)
        self.audit[key] = self.audit.get(key, 0) + n

    def read(self, domain, split, purpose, batch_size=8, rng=None):
        """Batch iterator; the access rule is checked before anything is yielded."""
        if purpose not in ("train", "eval"):
            raise BadConfig(f"unknown purpose {purpose!r}")
        if purpose == "train":
            self._check_train(domain, split)
        ds = self.datasets[(domain, split)]
        order = rng.permutation(len(ds)) if rng is not None else np.arange(len(ds))
        with_labels = purpose == "eval" or self.stage == 0
        return self._iterate(ds, order, batch_size, purpose, with_labels)

    def _iterate(self, ds, order, batch_size, purpose, with_labels):
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            self._count(ds.domain, ds.split, purpose, len(idx))
            images = ds.float_images(idx)
            if purpose == "eval":
                yield EvalBatch(images, ds.labels[idx])
            elif with_labels:
                yield TrainBatch(images, ds.labels[idx], idx)
            else:
                yield ImageBatch(images, idx)

    def source_train_reads_after_stage0(self):
        return sum(n for (stage, d, s, p), n in self.audit.items()
                   if stage >= 1 and d == self.source and s == "train")

    def audit_lines(self):
        lines = []
        for (stage, domain, split, purpose), n in sorted(self.audit.items()):
            lines.append({"event": "read", "stage": stage, "domain": domain,
                          "split": split, "purpose": purpose, "count": n})
        for a, b in self.transitions:
            lines.append({"event": "advance", "stage": b, "from": a})
        return lines

    def write_audit(self, path):
        with open(path, "w") as fh:
            for line in self.audit_lines():
                fh.write(json.dumps(line, sort_keys=True) + "\n")

    def load_audit(self, path):
        self.audit, self.transitions = {}, []
        for raw in Path(path).read_text().splitlines():
            line = json.loads(raw)
            if line["event"] == "read":
                key = (line["stage"], line["domain"], line["split"], line["purpose"])
                self.audit[key] = line["count"]
            else:
                self.transitions.append((line["from"], line["stage"]))
