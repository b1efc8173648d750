"""Stage orchestration shared by the CLI and the benchmark harness.

On-disk layout under the output directory::

    data/{domain}_{split}.cdsd        generated datasets
    checkpoints/source.cseg            segmenter after source training
    checkpoints/flow.cflw              flow fitted on source maps
    checkpoints/stage{k}.cseg          student after adaptation stage k
    checkpoints/stage{k}_teacher.cseg  EMA teacher after stage k
    metrics/stage{k}.json              evaluation records for stage k
    vault_state.json, audit.jsonl      data vault stage and read audit
    {prefix}_metrics.{csv,json}, {prefix}_miou.svg, run_manifest.json
"""

import json
import logging
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .adaptation import TeacherState, init_teacher, run_adapt_stage
from .config import PipelineConfig
from .datagen import CLASS_NAMES, DataVault, generate_domain, load_dataset, save_dataset
from .errors import BadConfig, MissingArtifact
from .flow import FlowModel, train_flow
from .metrics import MetricsRecord, evaluate, export, forgetting_report
from .rng import Rng
from .segmenter import load_segnet, save_segnet, train_source

logger = logging.getLogger(__name__)

REPORT_PREFIX = "conda"
SPLITS = ("train", "val")

# child-stream indices of the root Rng
_DATA, _SOURCE, _FLOW, _ADAPT = 1, 2, 3, 4


def domain_seed(cfg: PipelineConfig, index: int) -> int:
    return Rng(cfg.seed).child(_DATA).child(index).seed


def generate_datasets(cfg: PipelineConfig) -> dict:
    scene = cfg.scene_spec()
    out = {}
    for i, spec in enumerate(cfg.domains):
        train, val = generate_domain(spec, cfg.dataset.n_train, cfg.dataset.n_val,
                                     domain_seed(cfg, i), scene)
        out[(spec.name, "train")] = train
        out[(spec.name, "val")] = val
    return out


def make_vault(cfg: PipelineConfig, datasets) -> DataVault:
    return DataVault(datasets, [d.name for d in cfg.domains])


def build_flow(cfg: PipelineConfig) -> FlowModel:
    h, w = cfg.image_size
    return FlowModel(cfg.flow, cfg.classes, h, w, Rng(cfg.seed).child(_FLOW).child(0))


def fit_source(cfg, vault):
    return train_source(vault, cfg.segnet, Rng(cfg.seed).child(_SOURCE), log=logger.info)


def fit_flow(cfg, vault, source_params=None):
    flow = build_flow(cfg)
    segmenter = (source_params, cfg.segnet) if cfg.flow.train_on == "source_predictions" else None
    if segmenter is not None and source_params is None:
        raise MissingArtifact("flow.train_on=source_predictions needs the source checkpoint")
    train_flow(vault, flow, Rng(cfg.seed).child(_FLOW).child(1), segmenter=segmenter, log=logger.info)
    flow.freeze()
    return flow


def adapt_stage(cfg, vault, student, teacher, flow, adapt_cfg=None):
    """Advance the vault one stage and adapt to that stage's target."""
    adapt_cfg = adapt_cfg or cfg.adapt
    vault.advance()
    return run_adapt_stage(student, teacher, flow, vault, adapt_cfg, cfg.segnet,
                           Rng(cfg.seed).child(_ADAPT), log=logger.info)


def evaluate_all(cfg, vault, params, stage, config_hash=""):
    return [evaluate(params, cfg.segnet, vault, d.name, stage, timestamp=stage,
                     config_hash=config_hash) for d in cfg.domains]


def adapted_at(cfg):
    return {d.name: k for k, d in enumerate(cfg.domains)}


# ----------------------------------------------------------- on-disk runs

class RunDir:
    """Artifact paths and vault persistence for one output directory."""

    def __init__(self, cfg: PipelineConfig, out=None):
        self.cfg = cfg
        self.root = Path(out or cfg.output_dir)

    def data_path(self, domain, split):
        return self.root / "data" / f"{domain}_{split}.cdsd"

    @property
    def source_ckpt(self):
        return self.root / "checkpoints" / "source.cseg"

    @property
    def flow_ckpt(self):
        return self.root / "checkpoints" / "flow.cflw"

    def stage_ckpt(self, k):
        return self.source_ckpt if k == 0 else self.root / "checkpoints" / f"stage{k}.cseg"

    def teacher_ckpt(self, k):
        return self.root / "checkpoints" / f"stage{k}_teacher.cseg"

    def metrics_path(self, k):
        return self.root / "metrics" / f"stage{k}.json"

    @property
    def audit_path(self):
        return self.root / "audit.jsonl"

    @property
    def vault_state_path(self):
        return self.root / "vault_state.json"

    @property
    def manifest_path(self):
        return self.root / "run_manifest.json"

    @property
    def report_prefix(self):
        return self.root / REPORT_PREFIX

    def require(self, path, what):
        if not Path(path).exists():
            raise MissingArtifact(f"{what} not found at {path}")

    # vault ---------------------------------------------------------------

    def load_vault(self) -> DataVault:
        datasets = {}
        for i, spec in enumerate(self.cfg.domains):
            for split in SPLITS:
                path = self.data_path(spec.name, split)
                self.require(path, "dataset (run 'generate' first)")
                datasets[(spec.name, split)] = load_dataset(path, spec.name, split,
                                                            domain_seed(self.cfg, i))
        vault = make_vault(self.cfg, datasets)
        if self.vault_state_path.exists():
            vault.stage = json.loads(self.vault_state_path.read_text())["stage"]
        if self.audit_path.exists():
            vault.load_audit(self.audit_path)
        return vault

    def save_vault(self, vault: DataVault):
        self.vault_state_path.write_text(json.dumps({"stage": vault.stage}) + "\n")
        vault.write_audit(self.audit_path)

    # steps ---------------------------------------------------------------

    def generate(self):
        (self.root / "data").mkdir(parents=True, exist_ok=True)
        for (name, split), ds in generate_datasets(self.cfg).items():
            save_dataset(self.data_path(name, split), ds)
        vault = self.load_vault()
        vault.stage, vault.audit, vault.transitions = 0, {}, []
        self.save_vault(vault)
        for stale in (self.root / "checkpoints", self.root / "metrics"):
            if stale.exists():
                for f in stale.iterdir():
                    f.unlink()

    def train_source(self):
        vault = self.load_vault()
        params = fit_source(self.cfg, vault)
        self.source_ckpt.parent.mkdir(parents=True, exist_ok=True)
        save_segnet(self.source_ckpt, params, self.cfg.segnet)
        self.save_vault(vault)
        return params

    def train_flow(self):
        vault = self.load_vault()
        source = None
        if self.cfg.flow.train_on == "source_predictions":
            self.require(self.source_ckpt, "source checkpoint")
            source, _ = load_segnet(self.source_ckpt, self.cfg.segnet)
        flow = fit_flow(self.cfg, vault, source)
        self.flow_ckpt.parent.mkdir(parents=True, exist_ok=True)
        flow.save(self.flow_ckpt)
        self.save_vault(vault)
        return flow

    def adapt(self, k):
        n_targets = len(self.cfg.domains) - 1
        if not 1 <= k <= n_targets:
            raise BadConfig(f"stage must lie in 1..{n_targets}")
        self.require(self.flow_ckpt, "flow checkpoint (run 'train-flow' first)")
        self.require(self.stage_ckpt(k - 1), f"stage {k - 1} checkpoint")
        vault = self.load_vault()
        if vault.stage != k - 1:
            raise BadConfig(f"vault is at stage {vault.stage}; stage {k} needs stage {k - 1}")
        flow = FlowModel.load(self.flow_ckpt, self.cfg.flow)
        student, _ = load_segnet(self.stage_ckpt(k - 1), self.cfg.segnet)
        if k == 1:
            teacher = init_teacher(student, self.cfg.adapt.alpha)
        else:
            self.require(self.teacher_ckpt(k - 1), f"stage {k - 1} teacher")
            tstore, _ = load_segnet(self.teacher_ckpt(k - 1), self.cfg.segnet)
            teacher = TeacherState(tstore.snapshot(), self.cfg.adapt.alpha)
        student, teacher = adapt_stage(self.cfg, vault, student, teacher, flow)
        save_segnet(self.stage_ckpt(k), student, self.cfg.segnet)
        tstore = ad.ParamStore()
        for name, v in teacher.params.items():
            tstore.add(name, v)
        save_segnet(self.teacher_ckpt(k), tstore, self.cfg.segnet)
        self.save_vault(vault)
        return student

    def evaluate(self, k):
        self.require(self.stage_ckpt(k), f"stage {k} checkpoint")
        vault = self.load_vault()
        params, _ = load_segnet(self.stage_ckpt(k), self.cfg.segnet)
        records = evaluate_all(self.cfg, vault, params, k, self.cfg.hash())
        self.metrics_path(k).parent.mkdir(parents=True, exist_ok=True)
        self.metrics_path(k).write_text(
            json.dumps([r.__dict__ for r in records], indent=2, sort_keys=True) + "\n")
        self.save_vault(vault)
        return records

    def report(self):
        n_stages = len(self.cfg.domains) - 1
        records = []
        for k in range(n_stages + 1):
            self.require(self.metrics_path(k), f"stage {k} metrics (run 'evaluate --stage {k}')")
            records += [MetricsRecord(**r) for r in json.loads(self.metrics_path(k).read_text())]
        rep = forgetting_report(records, adapted_at(self.cfg), n_stages)
        return export(records, rep, self.report_prefix, CLASS_NAMES,
                      config_hash=self.cfg.hash(), seed=self.cfg.seed), records, rep

    def write_manifest(self, paths):
        n_stages = len(self.cfg.domains) - 1
        manifest = {
            "config_hash": self.cfg.hash(),
            "source_checkpoint": str(self.source_ckpt),
            "flow_checkpoint": str(self.flow_ckpt),
            "stage_checkpoints": [str(self.stage_ckpt(k)) for k in range(1, n_stages + 1)],
            "teacher_checkpoints": [str(self.teacher_ckpt(k)) for k in range(1, n_stages + 1)],
            "datasets": [str(self.data_path(d.name, s)) for d in self.cfg.domains for s in SPLITS],
            "audit_log": str(self.audit_path),
            "metrics": {k: str(v) for k, v in paths.items()},
        }
        for key in ("source_checkpoint", "flow_checkpoint", "audit_log"):
            self.require(manifest[key], key)
        for p in manifest["stage_checkpoints"] + manifest["datasets"] + list(manifest["metrics"].values()):
            self.require(p, "artifact")
        self.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return manifest

    def run_all(self):
        self.generate()
        self.train_source()
        self.train_flow()
        self.evaluate(0)
        for k in range(1, len(self.cfg.domains)):
            self.adapt(k)
            self.evaluate(k)
        paths, records, rep = self.report()
        return self.write_manifest(paths)


# ------------------------------------------------------- flow diagnostics

def uniform_simplex_maps(n, n_classes, h, w, rng):
    """Per-pixel Dirichlet(1, ..., 1) probability maps."""
    e = -np.log(1.0 - rng.uniform((n, n_classes, h, w)))
    return e / e.sum(axis=1, keepdims=True)
