"""Reduced-size verification suite behind ``conda-cl selftest``.

Every check returns ``(passed, detail)``. The suite covers finite-difference
gradients of each primitive, flow invertibility and log-determinants, the
linear-flow Gaussian oracle, the cross-entropy/KL bound, the IoU oracle and
the vault's access rule. It finishes well inside two minutes on one core.
"""

import sys
import time

import numpy as np

from . import autodiff as ad
from .adaptation import (adaptation_objective, bml_loss, cross_entropy, entropy,
                         init_teacher, ema_update, kl_divergence)
from .checks import fd_gradient_check, fd_jacobian
from .datagen import DataVault, DomainDataset
from .errors import AccessDenied
from .flow import ChannelMix, FlowConfig, FlowModel, prior_log_prob, squeeze_np, unsqueeze_np
from .metrics import accumulate_confusion, compute_iou, new_confusion
from .rng import Rng
from .segmenter import SegNetConfig, init_segnet, seg_forward, supervised_loss

GRAD_TOL = 1e-6


def small_flow(n_classes, h, w, rng, scales=2, blocks=2, hidden=8, scale=0.05):
    """A flow with every parameter perturbed so that no coupling is the identity."""
    cfg = FlowConfig(scales=scales, blocks_per_scale=blocks, hidden_channels=hidden,
                     label_smoothing=0.0)
    model = FlowModel(cfg, n_classes, h, w, rng)
    for name in model.store:
        node = model.store[name]
        if not name.endswith(".mix"):
            node.value = node.value + scale * rng.normal(node.shape)
    return model


# -------------------------------------------------------------- gradients

def _op_losses(rng):
    """name -> (loss closure, leaves) covering every differentiable primitive."""
    a = ad.variable(_kink_safe(rng))
    b = ad.variable(rng.normal((3, 4)))
    m = ad.variable(rng.normal((4, 2)))
    sq = ad.variable(rng.normal((3, 3)) + 3 * np.eye(3))
    pos = ad.variable(np.abs(rng.normal((3, 4))) + 0.2)
    img = ad.variable(rng.normal((2, 2, 4, 4)))
    img5 = ad.variable(rng.normal((2, 2, 5, 5)))
    ker = ad.variable(rng.normal((3, 2, 3, 3)))
    bias = ad.variable(rng.normal(3))
    wts = ad.constant(rng.normal((3, 4)))
    wmap = ad.constant(rng.normal((2, 2, 4, 4)))

    def weighted(node):
        return ad.sum_(ad.mul(node, wts))

    cases = {
        "add": (lambda: weighted(ad.tanh(ad.add(a, b))), [a, b]),
        "sub": (lambda: weighted(ad.tanh(ad.sub(a, b))), [a, b]),
        "mul": (lambda: weighted(ad.mul(a, b)), [a, b]),
        "scalar_mul": (lambda: weighted(ad.scalar_mul(ad.tanh(a), 1.7)), [a]),
        "matmul": (lambda: ad.sum_(ad.tanh(ad.matmul(a, m))), [a, m]),
        "concat": (lambda: ad.sum_(ad.tanh(ad.concat([a, b], axis=1))), [a, b]),
        "slice": (lambda: ad.sum_(ad.tanh(ad.slice_(a, 1, 1, 3))), [a]),
        "reshape": (lambda: ad.sum_(ad.mul(ad.reshape(ad.tanh(a), (4, 3)),
                                           ad.constant(wts.value.reshape(4, 3)))), [a]),
        "sum": (lambda: ad.sum_(ad.mul(ad.sum_(ad.tanh(a), axis=0), ad.constant(np.arange(4.0)))), [a]),
        "mean": (lambda: ad.sum_(ad.tanh(ad.mean(a, axis=1))), [a]),
        "logsumexp": (lambda: ad.sum_(ad.tanh(ad.logsumexp(a, axis=1))), [a]),
        "conv2d": (lambda: ad.sum_(ad.tanh(ad.conv2d(img, ker, bias, pad=1))), [img, ker, bias]),
        "conv2d_stride2": (lambda: ad.sum_(ad.tanh(ad.conv2d(img5, ker, stride=2, pad=1))), [img5, ker]),
        "avgpool2": (lambda: ad.sum_(ad.tanh(ad.avgpool2(img))), [img]),
        "nearest_upsample2": (lambda: ad.sum_(ad.tanh(ad.nearest_upsample2(img))), [img]),
        "relu": (lambda: weighted(ad.relu(a)), [a]),
        "leaky_relu": (lambda: weighted(ad.leaky_relu(a)), [a]),
        "tanh": (lambda: weighted(ad.tanh(a)), [a]),
        "sigmoid": (lambda: weighted(ad.sigmoid(a)), [a]),
        "exp": (lambda: weighted(ad.exp(ad.scalar_mul(a, 0.5))), [a]),
        "log": (lambda: weighted(ad.log(pos)), [pos]),
        "softmax_channels": (lambda: ad.sum_(ad.mul(ad.softmax_channels(img),
                                                    wmap)), [img]),
        "log_softmax_channels": (lambda: ad.sum_(ad.mul(ad.log_softmax_channels(img),
                                                        wmap)), [img]),
        "logabsdet": (lambda: ad.logabsdet(sq), [sq]),
    }
    return cases


def _kink_safe(rng):
    """Re-draw values too close to the relu kink for a central difference."""
    vals = rng.normal((3, 4))
    return np.where(np.abs(vals) < 1e-3, 0.5, vals)


def end_to_end_loss(rng, lam=0.005):
    """CE on pseudo labels plus lam * BML through a frozen flow, closed over a tiny segmenter."""
    seg_cfg = SegNetConfig(n_classes=2, widths=[4, 4])
    params = init_segnet(seg_cfg, rng.child(0))
    flow = small_flow(2, 4, 4, rng.child(1), scales=1, blocks=2, hidden=4)
    flow.freeze()
    images = rng.uniform((2, 3, 4, 4))
    labels = rng.integers(0, 2, size=(2, 4, 4))
    labels[0, 0, 0] = 255

    def loss():
        logits = seg_forward(images, params, seg_cfg)
        ce = supervised_loss(logits, labels)
        return adaptation_objective(ce, bml_loss(ad.softmax_channels(logits), flow), lam)

    return loss, [params[k] for k in params], flow


def check_gradients(rng):
    worst, name_worst = 0.0, ""
    for name, (loss, leaves) in _op_losses(rng).items():
        err = fd_gradient_check(loss, leaves, rng.child(len(name)), n_coords=20)
        if err > worst:
            worst, name_worst = err, name
    loss, leaves, _ = end_to_end_loss(rng.child(99))
    err = fd_gradient_check(loss, leaves, rng.child(100), n_coords=24)
    if err > worst:
        worst, name_worst = err, "ce+bml end to end"
    return worst <= GRAD_TOL, f"worst rel err {worst:.2e} ({name_worst})"


# ------------------------------------------------------------------- flow

def flow_roundtrip_error(model, n, rng):
    y = rng.uniform((n,) + model.input_shape)
    parts, _ = model.forward(y)
    back, _ = model.inverse(parts)
    return float(np.max(np.abs(back - y)))


def check_invertibility(rng, fault=False):
    model = small_flow(3, 8, 8, rng)
    model.fault_inverse = fault
    err = flow_roundtrip_error(model, 100, rng.child(1))
    return err <= 1e-8, f"max round-trip error {err:.2e} on 100 maps"


def logdet_vs_jacobian(model, rng):
    """(accumulated logdet, ln|det| of the finite-difference Jacobian) at one random map."""
    y = rng.uniform(model.input_shape)

    def fn(flat):
        parts, _ = model.forward(flat.reshape((1,) + model.input_shape))
        return np.concatenate([p.value.reshape(-1) for p in parts])

    jac = fd_jacobian(fn, y.reshape(-1))
    _, fd = np.linalg.slogdet(jac)
    _, ld = model.forward(y[None])
    return float(ld.value[0]), float(fd)


def check_logdet(rng):
    model = small_flow(2, 4, 4, rng, scales=1, blocks=4, hidden=4, scale=0.2)
    ld, fd = logdet_vs_jacobian(model, rng.child(2))
    rel = abs(ld - fd) / max(abs(fd), 1e-12)
    return rel <= 1e-5, f"logdet {ld:.8f} vs finite-difference {fd:.8f} (rel {rel:.1e})"


def linear_flow_log_prob(a, y):
    """log N(Ay; 0, I) + ln|det A| with the library's channel mix and prior."""
    store = ad.ParamStore()
    mix = ChannelMix("a", a.shape[0], store, Rng(0), init="identity")
    store["a"].value = np.array(a, dtype=np.float64)
    z, ld = mix.forward(ad.constant(np.asarray(y, dtype=np.float64).reshape(len(y), -1, 1, 1)))
    return ad.add(prior_log_prob([z]), ld).value


def mvn_log_density(y, cov):
    d = cov.shape[0]
    _, logdet = np.linalg.slogdet(cov)
    quad = np.einsum("ni,ij,nj->n", y, np.linalg.inv(cov), y)
    return -0.5 * (d * np.log(2 * np.pi) + logdet + quad)


def check_linear_flow(rng):
    a = rng.normal((4, 4)) + 2 * np.eye(4)
    y = rng.normal((10, 4))
    got = linear_flow_log_prob(a, y)
    want = mvn_log_density(y, np.linalg.inv(a.T @ a))
    err = float(np.max(np.abs(got - want)))
    return err <= 1e-8, f"max abs error {err:.1e} against the Gaussian density"


def check_squeeze(rng):
    x = rng.normal((2, 3, 4, 6))
    ok = np.array_equal(unsqueeze_np(squeeze_np(x)), x)
    return ok, "unsqueeze(squeeze(x)) == x"


def check_frozen_flow(rng):
    loss, leaves, flow = end_to_end_loss(rng)
    ad.backward(loss())
    flow_zero = all(np.all(flow.store[k].grad == 0) for k in flow.store)
    student = any(np.any(leaf.grad != 0) for leaf in leaves)
    return flow_zero and student, "flow gradients stay zero, student gradients do not"


# ------------------------------------------------------------- divergences

def random_pair(rng, max_support=16):
    k = int(rng.integers(1, max_support + 1))
    p = rng.uniform((k,))
    p[rng.uniform((k,)) < 0.3] = 0.0
    if p.sum() == 0:
        p[0] = 1.0
    q = rng.uniform((k,)) + 1e-3
    return p / p.sum(), q / q.sum()


def kl_bound_sweep(rng, n=1000):
    """Smallest of H(p), KL(p||q) and the bound gap over ``n`` random pairs."""
    worst_h = worst_kl = worst_gap = np.inf
    for i in range(n):
        p, q = random_pair(rng.child(i))
        h = entropy(p)
        kl = kl_divergence(p, q)
        gap = cross_entropy(p, q) - kl - h
        worst_h, worst_kl = min(worst_h, h), min(worst_kl, kl)
        worst_gap = min(worst_gap, -abs(gap))
    return worst_h, worst_kl, worst_gap


def check_kl_bound(rng):
    h, kl, gap = kl_bound_sweep(rng, 1000)
    ok = h >= -1e-12 and kl >= -1e-12 and gap >= -1e-12
    return ok, f"min H {h:.1e}, min KL {kl:.1e}, worst |CE - KL - H| {-gap:.1e}"


def check_objective_linearity(rng):
    ce = ad.constant(float(rng.uniform(())))
    bml = ad.constant(float(rng.normal(()) * 100))
    l1, l2 = 0.003, 0.005
    lhs = float(adaptation_objective(ce, bml, l1).value + adaptation_objective(ce, bml, l2).value
                - ce.value)
    rhs = float(adaptation_objective(ce, bml, l1 + l2).value)
    return abs(lhs - rhs) <= 1e-12, f"|obj(l1)+obj(l2)-ce-obj(l1+l2)| = {abs(lhs - rhs):.1e}"


def check_ema(rng):
    params = init_segnet(SegNetConfig(widths=[4, 4]), rng)
    teacher = init_teacher(params, 1.0)
    for name in params:
        params[name].value = params[name].value + 1.0
    same = ema_update(teacher, params)
    copy = ema_update(init_teacher(params, 0.0), params)
    ok = all(np.array_equal(same.params[k], teacher.params[k]) for k in params) and \
        all(np.array_equal(copy.params[k], params[k].value) for k in params)
    return ok, "alpha=1 keeps the teacher, alpha=0 copies the student"


# ----------------------------------------------------------------- metrics

def brute_force_iou(pred, gt, n_classes):
    """Per-class IoU from explicit pixel-coordinate sets (None when the union is empty)."""
    out = []
    for c in range(n_classes):
        p = {tuple(ix) for ix in np.argwhere(pred == c)}
        g = {tuple(ix) for ix in np.argwhere(gt == c)}
        union = p | g
        out.append(len(p & g) / len(union) if union else None)
    return out


def brute_force_miou(pred, gt, n_classes):
    vals = [v for v in brute_force_iou(pred, gt, n_classes) if v is not None]
    return sum(vals) / len(vals)


def check_miou(rng, n=50, n_classes=7):
    worst = 0.0
    for i in range(n):
        r = rng.child(i)
        gt = r.integers(0, n_classes, size=(8, 8))
        pred = r.integers(0, n_classes, size=(8, 8))
        cm = accumulate_confusion(pred, gt, new_confusion(n_classes))
        _, miou = compute_iou(cm)
        worst = max(worst, abs(miou - brute_force_miou(pred, gt, n_classes)))
    return worst == 0.0, f"max |confusion mIoU - set mIoU| = {worst:.1e} over {n} pairs"


# ------------------------------------------------------------------- vault

def check_vault(rng):
    def ds(name, split):
        return DomainDataset(np.zeros((2, 3, 4, 4), np.uint8), np.zeros((2, 4, 4), np.uint8),
                             name, split)

    data = {(d, s): ds(d, s) for d in ("src", "t1") for s in ("train", "val")}
    vault = DataVault(data, ["src", "t1"])
    list(vault.read("src", "train", "train", batch_size=2))
    vault.advance()
    try:
        list(vault.read("src", "train", "train", batch_size=2))
        denied = False
    except AccessDenied:
        denied = True
    list(vault.read("t1", "train", "train", batch_size=2))
    list(vault.read("src", "val", "eval", batch_size=2))
    ok = denied and vault.source_train_reads_after_stage0() == 0
    return ok, "source training reads denied after stage 0"


def check_rng(rng):
    first = int(Rng(0).next_u64(1)[0])
    return first == 0xE220A8397B1DCDAF, f"first SplitMix64 output {first:#x}"


CHECKS = [
    ("rng reference stream", check_rng),
    ("gradients of every op + CE/BML loss", check_gradients),
    ("flow invertibility", check_invertibility),
    ("log-det vs finite-difference Jacobian", check_logdet),
    ("linear flow vs Gaussian density", check_linear_flow),
    ("squeeze round trip", check_squeeze),
    ("frozen flow receives no gradient", check_frozen_flow),
    ("cross-entropy/KL bound sweep", check_kl_bound),
    ("objective linear in lambda", check_objective_linearity),
    ("EMA limits", check_ema),
    ("mIoU vs brute-force sets", check_miou),
    ("vault access rule", check_vault),
]


def run_selftest(fault=None, out=sys.stdout, seed=20240) -> bool:
    """Run every check; prints a table and returns True iff all pass."""
    root = Rng(seed)
    rows = []
    for i, (name, fn) in enumerate(CHECKS):
        t0 = time.time()
        try:
            if fn is check_invertibility:
                ok, detail = fn(root.child(i), fault=fault == "inverse")
            else:
                ok, detail = fn(root.child(i))
        except Exception as exc:  # a crash is a failure of that property, not of the suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        rows.append((name, ok, detail, time.time() - t0))
    width = max(len(r[0]) for r in rows)
    for name, ok, detail, secs in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {secs:5.1f}s  {detail}", file=out)
    failed = [r[0] for r in rows if not r[1]]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=out)
    else:
        print(f"all {len(rows)} checks passed", file=out)
    return not failed


__all__ = ["run_selftest", "CHECKS", "small_flow", "brute_force_iou", "brute_force_miou",
           "kl_bound_sweep", "linear_flow_log_prob", "mvn_log_density", "logdet_vs_jacobian",
           "flow_roundtrip_error", "end_to_end_loss"]
