"""Multi-scale normalizing flow over segmentation maps.

Each scale squeezes 2x2 spatial blocks into channels, applies ``K`` blocks of
(affine coupling, invertible channel mix), then routes half of the channels
to the standard-normal prior. Affine couplings alternate between a spatial
checkerboard mask and a channel-half split. Log-scales are ``tanh`` of the
scale network output; the last convolution of every coupling network starts
at zero so a fresh flow is a pure rearrangement (plus channel mixes).
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .checkpoint import decode_blocks, open_params, save_params
from .errors import BadBatch, BadConfig, BadLabel, BadShape, SingularMix
from .segmenter import IGNORE_ID

LOG_2PI = np.log(2.0 * np.pi)
MIN_ABS_DET = 1e-8


@dataclass
class FlowConfig:
    scales: int = 2
    blocks_per_scale: int = 4
    hidden_channels: int = 32
    dequant_delta: float = 0.02
    label_smoothing: float = 0.05
    input_pool: int = 1
    lr: float = 1e-5
    momentum: float = 0.9
    batch: int = 8
    epochs: int = 10
    train_on: str = "gt"

    def validate(self, n_classes=None):
        if self.scales < 1 or self.blocks_per_scale < 1 or self.hidden_channels < 1:
            raise BadConfig("scales, blocks_per_scale and hidden_channels must be >= 1")
        if not 0 <= self.dequant_delta < 0.5:
            raise BadConfig("dequant_delta must lie in [0, 0.5)")
        if n_classes is not None and not 0 <= self.label_smoothing < 1.0 / n_classes:
            raise BadConfig("label_smoothing must lie in [0, 1/C)")
        if self.input_pool not in (1, 2):
            raise BadConfig("input_pool must be 1 or 2")
        if self.train_on not in ("gt", "source_predictions"):
            raise BadConfig("train_on must be 'gt' or 'source_predictions'")


# ------------------------------------------------------------ rearrangement

def squeeze(x: ad.Node) -> ad.Node:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise BadShape(f"cannot squeeze extents {h}x{w}")
    x = ad.reshape(x, (n, c, h // 2, 2, w // 2, 2))
    x = ad.transpose(x, (0, 1, 3, 5, 2, 4))
    return ad.reshape(x, (n, 4 * c, h // 2, w // 2))


def unsqueeze_np(x: np.ndarray) -> np.ndarray:
    n, c4, h, w = x.shape
    c = c4 // 4
    return x.reshape(n, c, 2, 2, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, 2 * h, 2 * w)


def squeeze_np(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 5, 2, 4).reshape(n, 4 * c, h // 2, w // 2)


def _checkerboard(c, h, w, parity):
    yy, xx = np.mgrid[0:h, 0:w]
    m = ((yy + xx + parity) % 2 == 0).astype(np.float64)
    return np.broadcast_to(m, (c, h, w))[None].copy()


def _flatsum(x: ad.Node) -> ad.Node:
    return ad.sum_(ad.reshape(x, (x.shape[0], -1)), axis=1)


# ------------------------------------------------------------------ layers

class CouplingLayer:
    """Affine coupling: ``x_b -> x_b * exp(tanh(s(x_a))) + t(x_a)``."""

    def __init__(self, prefix, mask_kind, channels, h, w, hidden, store, rng, parity=0):
        self.prefix = prefix
        self.mask_kind = mask_kind
        self.channels = channels
        if mask_kind == "checkerboard":
            self.mask = _checkerboard(channels, h, w, parity)
            c_in = c_out = channels
        elif mask_kind == "channel-half":
            c_in = channels // 2
            c_out = channels - c_in
        else:
            raise BadConfig(f"unknown mask kind {mask_kind!r}")
        self.split = c_in
        for net in ("s", "t"):
            ad.make_param(store, f"{prefix}.{net}1.w", (hidden, c_in, 3, 3), "kaiming", rng)
            ad.make_param(store, f"{prefix}.{net}1.b", (hidden,), "zeros")
            ad.make_param(store, f"{prefix}.{net}2.w", (c_out, hidden, 3, 3), "zeros")
            ad.make_param(store, f"{prefix}.{net}2.b", (c_out,), "zeros")
        self.store = store

    def _net(self, name, x):
        p = self.store
        h = ad.leaky_relu(ad.conv2d(x, p[f"{self.prefix}.{name}1.w"], p[f"{self.prefix}.{name}1.b"], pad=1))
        return ad.conv2d(h, p[f"{self.prefix}.{name}2.w"], p[f"{self.prefix}.{name}2.b"], pad=1)

    def _params(self, cond):
        log_s = ad.tanh(self._net("s", cond))
        shift = self._net("t", cond)
        if self.mask_kind == "checkerboard":
            inv = ad.constant(1.0 - self.mask)
            log_s = ad.mul(log_s, inv)
            shift = ad.mul(shift, inv)
        return log_s, shift

    def forward(self, x: ad.Node):
        if self.mask_kind == "checkerboard":
            log_s, shift = self._params(ad.mul(x, ad.constant(self.mask)))
            y = ad.add(ad.mul(x, ad.exp(log_s)), shift)
        else:
            xa = ad.slice_(x, 1, 0, self.split)
            xb = ad.slice_(x, 1, self.split, self.channels)
            log_s, shift = self._params(xa)
            y = ad.concat([xa, ad.add(ad.mul(xb, ad.exp(log_s)), shift)], axis=1)
        return y, _flatsum(log_s)

    def inverse(self, y: np.ndarray, fault=False):
        sign = 1.0 if fault else -1.0
        if self.mask_kind == "checkerboard":
            log_s, shift = self._params(ad.constant(y * self.mask))
            x = (y - shift.value) * np.exp(sign * log_s.value)
        else:
            ya, yb = y[:, :self.split], y[:, self.split:]
            log_s, shift = self._params(ad.constant(ya))
            x = np.concatenate([ya, (yb - shift.value) * np.exp(sign * log_s.value)], axis=1)
        return x, -log_s.value.reshape(len(y), -1).sum(axis=1)


class ChannelMix:
    """Per-pixel multiplication by an invertible C' x C' matrix."""

    def __init__(self, name, channels, store, rng, init="rotation"):
        self.name = name
        value = rng.rotation(channels) if init == "rotation" else np.eye(channels)
        store.add(name, value)
        self.store = store

    @property
    def matrix(self):
        return self.store[self.name]

    def check(self):
        m = self.matrix.value
        if not np.all(np.isfinite(m)) or abs(np.linalg.det(m)) <= MIN_ABS_DET:
            raise SingularMix(f"{self.name}: |det| <= {MIN_ABS_DET}")

    def forward(self, x: ad.Node):
        self.check()
        m = self.matrix
        c = m.shape[0]
        y = ad.conv2d(x, ad.reshape(m, (c, c, 1, 1)))
        pixels = x.shape[2] * x.shape[3]
        logdet = ad.scalar_mul(ad.logabsdet(m), pixels)
        return y, ad.mul(logdet, ad.constant(np.ones(x.shape[0])))

    def inverse(self, y: np.ndarray):
        self.check()
        m = self.matrix.value
        x = np.einsum("oc,nchw->nohw", np.linalg.inv(m), y)
        _, ld = np.linalg.slogdet(m)
        return x, np.full(len(y), -ld * y.shape[2] * y.shape[3])


# ------------------------------------------------------------------- model

class FlowModel:
    """Bijection from C x H x W maps to a list of latent parts."""

    def __init__(self, config: FlowConfig, n_classes, height, width, rng, mix_init="rotation"):
        config.validate(n_classes)
        self.config = config
        self.n_classes = n_classes
        self.height = height
        self.width = width
        self.fault_inverse = False
        h, w = height // config.input_pool, width // config.input_pool
        div = 2 ** config.scales
        if height % config.input_pool or width % config.input_pool or h % div or w % div:
            raise BadShape(f"map extents {height}x{width} incompatible with "
                           f"input_pool={config.input_pool}, scales={config.scales}")
        self.store = ad.ParamStore()
        self.scales = []
        self.latent_shapes = []
        c = n_classes
        for lvl in range(config.scales):
            c, h, w = 4 * c, h // 2, w // 2
            steps = []
            for k in range(config.blocks_per_scale):
                prefix = f"s{lvl}.b{k}"
                kind = "checkerboard" if k % 2 == 0 else "channel-half"
                steps.append(CouplingLayer(f"{prefix}.cpl", kind, c, h, w, config.hidden_channels,
                                           self.store, rng, parity=(k // 2) % 2))
                steps.append(ChannelMix(f"{prefix}.mix", c, self.store, rng, mix_init))
            last = lvl == config.scales - 1
            keep = c if last else c // 2
            self.scales.append((steps, keep))
            if not last:
                self.latent_shapes.append((c - keep, h, w))
                c = keep
        self.latent_shapes.append((c, h, w))

    @property
    def input_shape(self):
        p = self.config.input_pool
        return (self.n_classes, self.height // p, self.width // p)

    @property
    def dim(self):
        return int(np.prod(self.input_shape))

    def freeze(self):
        self.store.freeze()

    def check_mixes(self):
        for steps, _ in self.scales:
            for layer in steps:
                if isinstance(layer, ChannelMix):
                    layer.check()

    def prepare(self, y) -> ad.Node:
        """Batch the input as a Node and apply the optional input pooling."""
        y = y if isinstance(y, ad.Node) else ad.constant(y)
        if y.value.ndim == 3:
            y = ad.reshape(y, (1,) + y.shape)
        if self.config.input_pool == 2:
            y = ad.avgpool2(y)
        if y.shape[1:] != self.input_shape:
            raise BadShape(f"flow expects maps of shape {self.input_shape}, got {y.shape[1:]}")
        return y

    def forward(self, y):
        """Returns ``(parts, logdet)``; parts are Nodes, logdet is a Node of shape (N,)."""
        x = self.prepare(y)
        logdet = None
        parts = []
        for steps, keep in self.scales:
            x = squeeze(x)
            for layer in steps:
                x, ld = layer.forward(x)
                logdet = ld if logdet is None else ad.add(logdet, ld)
            if keep < x.shape[1]:
                parts.append(ad.slice_(x, 1, keep, x.shape[1]))
                x = ad.slice_(x, 1, 0, keep)
        parts.append(x)
        return parts, logdet

    def inverse(self, parts):
        """Returns ``(y, logdet_inverse)`` as numpy arrays (no graph)."""
        parts = [np.asarray(p.value if isinstance(p, ad.Node) else p, dtype=np.float64) for p in parts]
        if len(parts) != len(self.latent_shapes):
            raise BadShape(f"expected {len(self.latent_shapes)} latent parts, got {len(parts)}")
        n = len(parts[0])
        for p, shape in zip(parts, self.latent_shapes):
            if p.shape != (n,) + shape:
                raise BadShape(f"latent part {p.shape} does not match {(n,) + shape}")
        logdet = np.zeros(n)
        x = parts[-1]
        for lvl in range(len(self.scales) - 1, -1, -1):
            steps, _ = self.scales[lvl]
            if lvl < len(self.scales) - 1:
                x = np.concatenate([x, parts[lvl]], axis=1)
            for layer in reversed(steps):
                if isinstance(layer, CouplingLayer):
                    x, ld = layer.inverse(x, fault=self.fault_inverse)
                else:
                    x, ld = layer.inverse(x)
                logdet = logdet + ld
            x = unsqueeze_np(x)
        return x, logdet

    # persistence ---------------------------------------------------------

    MAGIC = b"CFLW"
    _HEADER = "<IIIddIIII"

    def save(self, path):
        c = self.config
        header = struct.pack(self._HEADER, c.scales, c.blocks_per_scale, c.hidden_channels,
                             c.dequant_delta, c.label_smoothing, c.input_pool,
                             self.n_classes, self.height, self.width)
        save_params(path, self.MAGIC, header, self.store.snapshot())

    @classmethod
    def load(cls, path, base: FlowConfig = None):
        from .rng import Rng

        reader = open_params(path, cls.MAGIC)
        (scales, blocks, hidden, delta, eps, pool,
         n_classes, height, width) = reader.unpack(cls._HEADER)
        base = base or FlowConfig()
        cfg = FlowConfig(**{**base.__dict__, "scales": scales, "blocks_per_scale": blocks,
                            "hidden_channels": hidden, "dequant_delta": delta,
                            "label_smoothing": eps, "input_pool": pool})
        model = cls(cfg, n_classes, height, width, Rng(0), mix_init="identity")
        model.store.load(decode_blocks(reader))
        return model


# -------------------------------------------------------------- operations

def flow_forward(y, model: FlowModel):
    return model.forward(y)


def flow_inverse(parts, model: FlowModel):
    return model.inverse(parts)


def prior_log_prob(parts) -> ad.Node:
    total = None
    for p in parts:
        d = int(np.prod(p.shape[1:]))
        term = ad.add(ad.scalar_mul(_flatsum(ad.mul(p, p)), -0.5),
                      ad.constant(np.full(p.shape[0], -0.5 * d * LOG_2PI)))
        total = term if total is None else ad.add(total, term)
    return total


def log_prob(y, model: FlowModel) -> ad.Node:
    """log pi(G(y)) + log|det dG/dy|, one value per map (Node of shape (N,))."""
    parts, logdet = model.forward(y)
    return ad.add(prior_log_prob(parts), logdet)


def nll_batch(maps, model: FlowModel) -> ad.Node:
    """Mean negative log-likelihood of a batch (array N x C x H x W, list, or Node)."""
    if isinstance(maps, (list, tuple)):
        maps = np.stack([np.asarray(m, dtype=np.float64) for m in maps]) if maps else np.empty(0)
    value = maps.value if isinstance(maps, ad.Node) else np.asarray(maps)
    if value.size == 0:
        raise BadBatch("empty batch")
    lp = log_prob(maps, model)
    return ad.scalar_mul(ad.sum_(lp), -1.0 / lp.shape[0])


def dequantize(labels, n_classes, eps, delta, rng) -> np.ndarray:
    """Label-smoothed one-hot maps plus uniform noise in [0, delta).

    The true class gets ``1 - eps + eps / C``, the others ``eps / C``; ignored
    pixels get ``1 / C`` everywhere. Accepts H x W or N x H x W labels.
    """
    labels = np.asarray(labels)
    single = labels.ndim == 2
    if single:
        labels = labels[None]
    ignore = labels == IGNORE_ID
    if np.any((labels[~ignore] < 0) | (labels[~ignore] >= n_classes)):
        raise BadLabel(f"label ids must lie in [0, {n_classes}) or equal {IGNORE_ID}")
    if not 0 <= eps < 1.0 / n_classes or not 0 <= delta < 0.5:
        raise BadConfig("smoothing or dequantization width out of range")
    n, h, w = labels.shape
    out = np.full((n, n_classes, h, w), eps / n_classes)
    ni, hi, wi = np.nonzero(~ignore)
    out[ni, labels[~ignore].astype(np.int64), hi, wi] = 1.0 - eps + eps / n_classes
    if ignore.any():
        out.transpose(0, 2, 3, 1)[ignore] = 1.0 / n_classes
    if delta:
        out = out + delta * rng.uniform(out.shape)
    return out[0] if single else out


def sample(model: FlowModel, n, rng):
    """Draw ``n`` maps; returns ``(maps, parts, logdet_inverse)``."""
    if n < 1:
        raise BadBatch("need at least one sample")
    parts = [rng.normal((n,) + shape) for shape in model.latent_shapes]
    maps, ld_inv = model.inverse(parts)
    return maps, parts, ld_inv


def train_flow(vault, model: FlowModel, rng, segmenter=None, log=None, domain=None):
    """Fit the flow by SGD on the negative log-likelihood of source segmentation maps.

    With ``config.train_on == "source_predictions"`` the maps are the softmax
    outputs of ``segmenter = (params, seg_cfg)`` plus the same uniform noise.
    """
    from .segmenter import seg_forward

    cfg = model.config
    order_rng = rng.child(0)
    noise_rng = rng.child(1)
    history = []
    for epoch in range(cfg.epochs):
        total, steps = 0.0, 0
        for batch in vault.read(domain or vault.source, "train", "train",
                                batch_size=cfg.batch, rng=order_rng):
            if cfg.train_on == "gt":
                maps = dequantize(batch.labels, model.n_classes, cfg.label_smoothing,
                                  cfg.dequant_delta, noise_rng)
            else:
                params, seg_cfg = segmenter
                probs = ad.softmax_channels(seg_forward(batch.images, params, seg_cfg)).value
                maps = probs + cfg.dequant_delta * noise_rng.uniform(probs.shape)
            loss = nll_batch(maps, model)
            ad.backward(loss)
            ad.sgd_step(model.store, cfg.lr, cfg.momentum)
            model.check_mixes()
            total += float(loss.value)
            steps += 1
        history.append(total / max(steps, 1))
        if log:
            log(f"flow epoch {epoch + 1}/{cfg.epochs} nll {history[-1]:.2f}")
    return history
