"""Small encoder-decoder segmentation network and its supervised source training."""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import decode_blocks, open_params, save_params
from .errors import BadShape, EmptyLoss

IGNORE_ID = 255


@dataclass
class SegNetConfig:
    in_channels: int = 3
    n_classes: int = 7
    widths: list = field(default_factory=lambda: [16, 32, 64])
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch: int = 8
    epochs: int = 30

    @property
    def levels(self):
        return len(self.widths)


def init_segnet(cfg: SegNetConfig, rng) -> ad.ParamStore:
    """Kaiming-initialised weights, zero biases."""
    store = ad.ParamStore()
    w = cfg.widths
    prev = cfg.in_channels
    for i, width in enumerate(w):
        ad.make_param(store, f"enc{i}.w", (width, prev, 3, 3), "kaiming", rng)
        ad.make_param(store, f"enc{i}.b", (width,), "zeros")
        prev = width
    for i in range(len(w) - 1, 0, -1):
        ad.make_param(store, f"dec{i}.w", (w[i - 1], w[i], 3, 3), "kaiming", rng)
        ad.make_param(store, f"dec{i}.b", (w[i - 1],), "zeros")
    ad.make_param(store, "head.w", (cfg.n_classes, w[0], 1, 1), "kaiming", rng)
    ad.make_param(store, "head.b", (cfg.n_classes,), "zeros")
    return store


def seg_forward(images, params: ad.ParamStore, cfg: SegNetConfig) -> ad.Node:
    """Logits N x C x H x W for images N x 3 x H x W (or a single 3 x H x W image)."""
    x = images if isinstance(images, ad.Node) else ad.constant(images)
    if x.value.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    if x.value.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise BadShape(f"expected N x {cfg.in_channels} x H x W images, got {x.shape}")
    div = 2 ** (cfg.levels - 1)
    if x.shape[2] % div or x.shape[3] % div:
        raise BadShape(f"image extents {x.shape[2:]} not divisible by {div}")

    skips = []
    h = x
    for i in range(cfg.levels):
        if i:
            h = ad.avgpool2(h)
        h = ad.leaky_relu(ad.conv2d(h, params[f"enc{i}.w"], params[f"enc{i}.b"], pad=1))
        skips.append(h)
    for i in range(cfg.levels - 1, 0, -1):
        h = ad.nearest_upsample2(h)
        h = ad.leaky_relu(ad.conv2d(h, params[f"dec{i}.w"], params[f"dec{i}.b"], pad=1))
        h = ad.add(h, skips[i - 1])
    return ad.conv2d(h, params["head.w"], params["head.b"])


def predict_labels(images, params, cfg) -> np.ndarray:
    """Per-pixel argmax; ties go to the lowest class index."""
    logits = seg_forward(images, params, cfg).value
    return np.argmax(logits, axis=1).astype(np.int64)


def supervised_loss(logits: ad.Node, labels) -> ad.Node:
    """Mean cross-entropy over non-ignored pixels."""
    labels = np.asarray(labels)
    n, c, h, w = logits.shape
    if labels.ndim == 2:
        labels = labels[None]
    if labels.shape != (n, h, w):
        raise BadShape(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = labels != IGNORE_ID
    count = int(valid.sum())
    if count == 0:
        raise EmptyLoss("every pixel is ignored")
    onehot = np.zeros((n, c, h, w))
    ni, hi, wi = np.nonzero(valid)
    onehot[ni, labels[valid].astype(np.int64), hi, wi] = 1.0
    picked = ad.mul(ad.log_softmax_channels(logits), ad.constant(onehot))
    return ad.scalar_mul(ad.sum_(picked), -1.0 / count)


def train_source(vault, cfg: SegNetConfig, rng, domain=None, log=None) -> ad.ParamStore:
    """Minibatch SGD on the labelled source training split (vault stage 0 only)."""
    params = init_segnet(cfg, rng.child(0))
    order_rng = rng.child(1)
    for epoch in range(cfg.epochs):
        total, steps = 0.0, 0
        for batch in vault.read(domain or vault.source, "train", "train",
                                batch_size=cfg.batch, rng=order_rng):
            loss = supervised_loss(seg_forward(batch.images, params, cfg), batch.labels)
            ad.backward(loss)
            ad.sgd_step(params, cfg.lr, cfg.momentum, cfg.weight_decay)
            total += float(loss.value)
            steps += 1
        if log:
            log(f"source epoch {epoch + 1}/{cfg.epochs} loss {total / max(steps, 1):.4f}")
    return params


# ------------------------------------------------------------- persistence

MAGIC = b"CSEG"


def save_segnet(path, params: ad.ParamStore, cfg: SegNetConfig):
    header = struct.pack("<III", cfg.in_channels, cfg.n_classes, len(cfg.widths))
    header += struct.pack(f"<{len(cfg.widths)}I", *cfg.widths)
    save_params(path, MAGIC, header, params.snapshot())


def load_segnet(path, cfg: SegNetConfig = None):
    """Returns ``(params, cfg)``; architecture fields come from the file."""
    reader = open_params(path, MAGIC)
    in_ch, n_classes, n_w = reader.unpack("<III")
    widths = list(reader.unpack(f"<{n_w}I"))
    base = cfg if cfg is not None else SegNetConfig()
    cfg = SegNetConfig(**{**base.__dict__, "in_channels": in_ch,
                          "n_classes": n_classes, "widths": widths})
    values = decode_blocks(reader)
    store = ad.ParamStore()
    for k, v in values.items():
        store.add(k, v)
    return store, cfg
