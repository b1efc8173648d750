"""Continual source-free adaptation with an EMA teacher and the bijective likelihood penalty.

Per target batch the student minimises

    CE(student logits, teacher pseudo labels) + lam * BML(student softmax),

where BML is the mean negative log-likelihood of the student's probability
maps under the flow fitted to source segmentations. Because
``-E_p[log q] = KL(p || q) + H(p)`` with ``H(p) >= 0`` for discrete ``p``,
the penalty upper-bounds the KL divergence from the source prediction
distribution without reading any source data.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import BadConfig, BadShape, InfiniteKL
from .flow import log_prob
from .segmenter import IGNORE_ID, seg_forward, supervised_loss


@dataclass
class AdaptConfig:
    lam: float = 0.005
    tau: float = 0.9
    alpha: float = 0.99
    epochs_per_stage: int = 15
    batch: int = 8
    lr: float = 2.5e-4
    momentum: float = 0.9
    weight_decay: float = 0.0
    pseudo_label_every: str = "iteration"

    def validate(self):
        if self.lam < 0:
            raise BadConfig("lam must be nonnegative")
        if not 0 < self.tau <= 1:
            raise BadConfig("tau must lie in (0, 1]")
        if not 0 <= self.alpha <= 1:
            raise BadConfig("alpha must lie in [0, 1]")
        if self.pseudo_label_every not in ("iteration", "epoch"):
            raise BadConfig("pseudo_label_every must be 'iteration' or 'epoch'")


@dataclass
class TeacherState:
    params: dict   # name -> ndarray
    alpha: float


def init_teacher(student: ad.ParamStore, alpha) -> TeacherState:
    return TeacherState(student.snapshot(), alpha)


def ema_update(teacher: TeacherState, student: ad.ParamStore) -> TeacherState:
    """theta_T <- alpha * theta_T + (1 - alpha) * theta_S."""
    a = teacher.alpha
    out = {}
    for name, value in teacher.params.items():
        s = student[name].value
        if s.shape != value.shape:
            raise BadShape(f"{name}: teacher {value.shape} vs student {s.shape}")
        out[name] = a * value + (1.0 - a) * s
    return TeacherState(out, a)


def teacher_store(teacher: TeacherState) -> ad.ParamStore:
    store = ad.ParamStore()
    for k, v in teacher.params.items():
        store.add(k, v)
    store.freeze()
    return store


@dataclass
class PseudoLabelBatch:
    labels: np.ndarray
    mask: np.ndarray
    tau: float


def pseudo_labels_from_probs(probs, tau) -> PseudoLabelBatch:
    if not 0 < tau <= 1:
        raise BadConfig("tau must lie in (0, 1]")
    labels = np.argmax(probs, axis=1)
    mask = probs.max(axis=1) >= tau
    labels = np.where(mask, labels, IGNORE_ID)
    return PseudoLabelBatch(labels, mask, tau)


def make_pseudo_labels(teacher: TeacherState, images, tau, seg_cfg) -> PseudoLabelBatch:
    """Teacher argmax labels; pixels with max probability below ``tau`` are ignored."""
    probs = ad.softmax_channels(seg_forward(images, teacher_store(teacher), seg_cfg)).value
    return pseudo_labels_from_probs(probs, tau)


# ------------------------------------------------------------- divergences

def kl_divergence(p, q) -> float:
    """sum p ln(p / q) over the support of p."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise BadShape("p and q must share a support")
    support = p > 0
    if np.any(q[support] <= 0):
        raise InfiniteKL("q vanishes where p has mass")
    return float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))


def cross_entropy(p, q) -> float:
    """-sum p ln q, the quantity the likelihood penalty estimates."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    support = p > 0
    if np.any(q[support] <= 0):
        raise InfiniteKL("q vanishes where p has mass")
    return float(-np.sum(p[support] * np.log(q[support])))


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def bml_loss(probs: ad.Node, flow) -> ad.Node:
    """Mean negative flow log-likelihood of the student's probability maps.

    The flow must be frozen; gradients reach ``probs`` (and through it the
    student) but never the flow parameters.
    """
    if probs.value.ndim != 4 or probs.shape[1] != flow.n_classes or \
            probs.shape[2:] != (flow.height, flow.width):
        raise BadShape(f"probability maps {probs.shape} do not match the flow input space")
    lp = log_prob(probs, flow)
    return ad.scalar_mul(ad.sum_(lp), -1.0 / lp.shape[0])


def adaptation_objective(ce_pseudo: ad.Node, bml: ad.Node, lam) -> ad.Node:
    if lam < 0:
        raise BadConfig("lam must be nonnegative")
    if lam == 0:
        return ce_pseudo
    return ad.add(ce_pseudo, ad.scalar_mul(bml, lam))


# ------------------------------------------------------------------- stage

def adapt_step(student, teacher, flow, images, cfg: AdaptConfig, seg_cfg, pseudo=None):
    """One SGD step on a target batch; returns ``(teacher', stats)``."""
    if pseudo is None:
        pseudo = make_pseudo_labels(teacher, images, cfg.tau, seg_cfg)
    logits = seg_forward(images, student, seg_cfg)
    stats = {"kept": float(pseudo.mask.mean())}
    if pseudo.mask.any():
        ce = supervised_loss(logits, pseudo.labels)
    else:
        # nothing confident: only the likelihood penalty drives the step
        ce = ad.scalar_mul(ad.sum_(logits), 0.0)
    if cfg.lam > 0:
        bml = bml_loss(ad.softmax_channels(logits), flow)
        stats["bml"] = float(bml.value)
    else:
        bml = None
    loss = adaptation_objective(ce, bml, cfg.lam) if bml is not None else ce
    stats["ce"] = float(ce.value)
    ad.backward(loss)
    ad.sgd_step(student, cfg.lr, cfg.momentum, cfg.weight_decay)
    return ema_update(teacher, student), stats


def run_adapt_stage(student, teacher, flow, vault, cfg: AdaptConfig, seg_cfg, rng, log=None):
    """Adapt to the current stage's target domain; reads only that domain's training images."""
    cfg.validate()
    if vault.stage < 1:
        raise BadConfig("adaptation stages start at vault stage 1")
    if flow is not None:
        flow.freeze()
        before = flow.store.snapshot()
    domain = vault.targets[vault.stage - 1]
    order_rng = rng.child(vault.stage)
    for epoch in range(cfg.epochs_per_stage):
        cached = {}
        if cfg.pseudo_label_every == "epoch":
            for batch in vault.read(domain, "train", "train", batch_size=cfg.batch):
                pl = make_pseudo_labels(teacher, batch.images, cfg.tau, seg_cfg)
                for j, i in enumerate(batch.indices):
                    cached[int(i)] = (pl.labels[j], pl.mask[j])
        totals = {}
        steps = 0
        for batch in vault.read(domain, "train", "train", batch_size=cfg.batch, rng=order_rng):
            pseudo = None
            if cached:
                labels = np.stack([cached[int(i)][0] for i in batch.indices])
                mask = np.stack([cached[int(i)][1] for i in batch.indices])
                pseudo = PseudoLabelBatch(labels, mask, cfg.tau)
            teacher, stats = adapt_step(student, teacher, flow if cfg.lam > 0 else None,
                                        batch.images, cfg, seg_cfg, pseudo)
            for k, v in stats.items():
                totals[k] = totals.get(k, 0.0) + v
            steps += 1
        if log:
            msg = " ".join(f"{k} {v / max(steps, 1):.4f}" for k, v in sorted(totals.items()))
            log(f"stage {vault.stage} ({domain}) epoch {epoch + 1}/{cfg.epochs_per_stage} {msg}")
    if flow is not None:
        after = flow.store.snapshot()
        assert all(np.array_equal(before[k], after[k]) for k in before), "flow parameters changed"
    return student, teacher
