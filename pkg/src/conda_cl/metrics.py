"""Confusion matrices, IoU, forgetting deltas and report export."""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadShape, EmptyMetric, IncompleteRecords, WriteError
from .segmenter import IGNORE_ID, predict_labels

# Published full-scale numbers (GTA5 source, continual targets), kept for context only.
REFERENCE_RESULTS = {
    "setting": "GTA5 -> Cityscapes -> IDD -> Mapillary, continual, mIoU %",
    "ours": {"Cityscapes": 69.4, "IDD": 66.2, "Mapillary": 71.2, "avg": 68.9},
    "continual_baseline": {"Cityscapes": 67.4, "IDD": 63.6, "Mapillary": 70.0, "avg": 67.0},
}


def new_confusion(n_classes) -> np.ndarray:
    return np.zeros((n_classes, n_classes), dtype=np.int64)


def accumulate_confusion(pred, gt, cm: np.ndarray) -> np.ndarray:
    """Rows are ground truth, columns predictions; ignored pixels are skipped."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise BadShape(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    c = cm.shape[0]
    keep = gt != IGNORE_ID
    idx = c * gt[keep].astype(np.int64) + pred[keep].astype(np.int64)
    return cm + np.bincount(idx, minlength=c * c).reshape(c, c)


def compute_iou(cm):
    """Per-class IoU (``None`` where the union is empty) and their mean."""
    cm = np.asarray(cm)
    inter = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    ious = [float(i / u) if u > 0 else None for i, u in zip(inter, union)]
    defined = [v for v in ious if v is not None]
    if not defined:
        raise EmptyMetric("no class has a nonempty union")
    return ious, float(np.mean(defined))


@dataclass
class MetricsRecord:
    stage: int
    domain: str
    ious: list
    miou: float
    timestamp: int = 0
    config_hash: str = ""

    @classmethod
    def from_confusion(cls, stage, domain, cm, timestamp=0, config_hash=""):
        ious, miou = compute_iou(cm)
        return cls(stage, domain, ious, miou, timestamp, config_hash)


def evaluate(params, seg_cfg, vault, domain, stage, split="val", batch_size=16,
             timestamp=0, config_hash=""):
    """Score one domain's split through the vault's evaluation interface."""
    cm = new_confusion(seg_cfg.n_classes)
    for batch in vault.read(domain, split, "eval", batch_size=batch_size):
        cm = accumulate_confusion(predict_labels(batch.images, params, seg_cfg), batch.labels, cm)
    return MetricsRecord.from_confusion(stage, domain, cm, timestamp, config_hash)


@dataclass
class ForgettingReport:
    deltas: dict = field(default_factory=dict)        # (domain, stage) -> delta
    stage_average: dict = field(default_factory=dict)  # stage -> mean mIoU over domains

    def to_json(self):
        return {
            "deltas": [{"domain": d, "stage": s, "delta": v}
                       for (d, s), v in sorted(self.deltas.items(), key=lambda kv: (kv[0][1], kv[0][0]))],
            "stage_average": [{"stage": s, "miou": v} for s, v in sorted(self.stage_average.items())],
        }

    @classmethod
    def from_json(cls, doc):
        return cls({(d["domain"], d["stage"]): d["delta"] for d in doc["deltas"]},
                   {d["stage"]: d["miou"] for d in doc["stage_average"]})


def forgetting_report(records, adapted_at: dict, n_stages=None) -> ForgettingReport:
    """``adapted_at`` maps each target domain to the stage in which it was adapted.

    delta(d, s) = mIoU(d at stage s) - mIoU(d at stage adapted_at[d]) for
    every recorded stage ``s >= adapted_at[d]``.
    """
    table = {(r.domain, r.stage): r.miou for r in records}
    stages = sorted({r.stage for r in records}) if n_stages is None else list(range(n_stages + 1))
    domains = sorted({r.domain for r in records} | set(adapted_at))
    for s in stages:
        for d in domains:
            if (d, s) not in table:
                raise IncompleteRecords(f"missing record for domain {d!r} at stage {s}")
    report = ForgettingReport()
    for d, own in adapted_at.items():
        for s in stages:
            if s >= own:
                report.deltas[(d, s)] = table[(d, s)] - table[(d, own)]
    for s in stages:
        report.stage_average[s] = float(np.mean([table[(d, s)] for d in domains]))
    return report


# ------------------------------------------------------------------ export

def _pct(x):
    return f"{100.0 * x:.1f}"


def records_to_csv(records, class_names) -> str:
    lines = ["stage,domain,class,iou"]
    for r in sorted(records, key=lambda r: (r.stage, r.domain)):
        for name, v in zip(class_names, r.ious):
            lines.append(f"{r.stage},{r.domain},{name},{'' if v is None else _pct(v)}")
        lines.append(f"{r.stage},{r.domain},ALL,{_pct(r.miou)}")
    return "\n".join(lines) + "\n"


def miou_svg(records, width=480, height=300) -> str:
    """Self-contained SVG line chart: mIoU per evaluated domain across stages."""
    domains = sorted({r.domain for r in records})
    stages = sorted({r.stage for r in records})
    table = {(r.domain, r.stage): r.miou for r in records}
    left, right, top, bottom = 50, 120, 20, 40
    pw, ph = width - left - right, height - top - bottom
    colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"]

    def px(s):
        return left + (pw * (stages.index(s) / max(len(stages) - 1, 1)))

    def py(v):
        return top + ph * (1.0 - v)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = py(tick)
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" font-size="10" text-anchor="end">{tick * 100:.0f}</text>')
    for s in stages:
        out.append(f'<text x="{px(s):.1f}" y="{top + ph + 16}" font-size="10" text-anchor="middle">{s}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 6}" font-size="11" text-anchor="middle">stage</text>')
    out.append(f'<text x="12" y="{top + ph / 2:.1f}" font-size="11" text-anchor="middle" '
               f'transform="rotate(-90 12 {top + ph / 2:.1f})">mIoU (%)</text>')
    for k, d in enumerate(domains):
        color = colors[k % len(colors)]
        pts = [(px(s), py(table[(d, s)])) for s in stages if (d, s) in table]
        path = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{path}"/>')
        for x, y in pts:
            out.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3" fill="{color}"/>')
        ly = top + 14 * k + 10
        out.append(f'<rect x="{left + pw + 10}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{left + pw + 24}" y="{ly + 1}" font-size="11">{d}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export(records, report: ForgettingReport, path_prefix, class_names,
           config_hash="", seed=0, extra=None):
    """Write ``{prefix}_metrics.csv``, ``{prefix}_metrics.json`` and ``{prefix}_miou.svg``."""
    prefix = str(path_prefix)
    doc = {
        "config_hash": config_hash,
        "seed": seed,
        "class_names": list(class_names),
        "records": [asdict(r) for r in sorted(records, key=lambda r: (r.stage, r.domain))],
        "report": report.to_json(),
        "reference_results": REFERENCE_RESULTS,
    }
    if extra:
        doc["extra"] = extra
    paths = {"csv": prefix + "_metrics.csv", "json": prefix + "_metrics.json",
             "svg": prefix + "_miou.svg"}
    try:
        Path(paths["csv"]).parent.mkdir(parents=True, exist_ok=True)
        Path(paths["csv"]).write_text(records_to_csv(records, class_names))
        Path(paths["json"]).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        Path(paths["svg"]).write_text(miou_svg(records))
    except OSError as exc:
        raise WriteError(str(exc)) from exc
    return paths


def load_export(path):
    """Parse a metrics JSON back into ``(records, report, doc)``."""
    doc = json.loads(Path(path).read_text())
    records = [MetricsRecord(**r) for r in doc["records"]]
    return records, ForgettingReport.from_json(doc["report"]), doc
