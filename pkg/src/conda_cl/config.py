"""Strict JSON pipeline configuration."""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .adaptation import AdaptConfig
from .datagen import DEFAULT_PALETTE, N_CLASSES, DomainSpec, SceneSpec
from .errors import BadConfig, ConfigError, MissingArtifact
from .flow import FlowConfig
from .segmenter import SegNetConfig


@dataclass
class DatasetSizes:
    n_train: int = 128
    n_val: int = 32


@dataclass
class PipelineConfig:
    seed: int
    domains: list
    classes: int = N_CLASSES
    image_size: list = field(default_factory=lambda: [32, 32])
    dataset: DatasetSizes = field(default_factory=DatasetSizes)
    scene: dict = field(default_factory=dict)
    segnet: SegNetConfig = field(default_factory=SegNetConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    output_dir: str = "runs/default"

    def scene_spec(self) -> SceneSpec:
        h, w = self.image_size
        return SceneSpec(height=h, width=w, **{k: tuple(v) for k, v in self.scene.items()})

    def to_dict(self):
        d = asdict(self)
        d["domains"] = [asdict(s) for s in self.domains]
        for s in d["domains"]:
            s["palette"] = [list(c) for c in s["palette"]]
        return d

    def hash(self) -> str:
        doc = self.to_dict()
        doc.pop("output_dir")
        canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


_SCENE_KEYS = {"nature", "constr", "vehicle", "human", "object"}


def _check_type(path, value, expected):
    if expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, expected)
    if not ok:
        raise ConfigError(path, f"expected {expected.__name__}, got {type(value).__name__}")
    return float(value) if expected is float else value


def _fill(cls, doc, path, skip=()):
    if not isinstance(doc, dict):
        raise ConfigError(path, "expected an object")
    known = {f.name: f for f in fields(cls) if f.name not in skip}
    kwargs = {}
    for key, value in doc.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(where, "unknown key")
        ftype = known[key].type
        if ftype in (int, float, str, bool, list):
            kwargs[key] = _check_type(where, value, ftype)
        else:
            kwargs[key] = value
    return kwargs


def _domain(doc, path) -> DomainSpec:
    kwargs = _fill(DomainSpec, doc, path)
    if "name" not in kwargs:
        raise ConfigError(f"{path}.name", "missing required key")
    if "palette" in kwargs:
        pal = kwargs["palette"]
        if len(pal) != N_CLASSES or any(not isinstance(c, list) or len(c) != 3 for c in pal):
            raise ConfigError(f"{path}.palette", f"expected {N_CLASSES} RGB triples")
        kwargs["palette"] = tuple(tuple(c) for c in pal)
    try:
        return DomainSpec(**kwargs)
    except BadConfig as exc:
        raise ConfigError(path, str(exc)) from None


def parse_config_dict(doc: dict) -> PipelineConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "expected an object")
    top = _fill(PipelineConfig, doc, "", skip=())
    for required in ("seed", "domains"):
        if required not in top:
            raise ConfigError(required, "missing required key")
    seed = top["seed"]
    if seed < 0:
        raise ConfigError("seed", "must be nonnegative")
    raw_domains = _check_type("domains", top["domains"], list)
    if len(raw_domains) < 2:
        raise ConfigError("domains", "need a source and at least one target")
    domains = [_domain(d, f"domains[{i}]") for i, d in enumerate(raw_domains)]
    names = [d.name for d in domains]
    if len(set(names)) != len(names):
        raise ConfigError("domains", "domain names must be unique")

    classes = top.get("classes", N_CLASSES)
    if classes != N_CLASSES:
        raise ConfigError("classes", f"the scene generator produces exactly {N_CLASSES} classes")
    image_size = top.get("image_size", [32, 32])
    if len(image_size) != 2 or any(not isinstance(v, int) or v < 16 for v in image_size):
        raise ConfigError("image_size", "expected [H, W] with both extents >= 16")

    dataset = DatasetSizes(**_fill(DatasetSizes, top.get("dataset", {}), "dataset"))
    if dataset.n_train < 1 or dataset.n_val < 1:
        raise ConfigError("dataset", "sizes must be >= 1")

    scene = top.get("scene", {})
    if not isinstance(scene, dict):
        raise ConfigError("scene", "expected an object")
    for k, v in scene.items():
        if k not in _SCENE_KEYS:
            raise ConfigError(f"scene.{k}", "unknown key")
        if not isinstance(v, list) or len(v) != 2 or not all(isinstance(x, int) and x >= 0 for x in v) \
                or v[0] > v[1]:
            raise ConfigError(f"scene.{k}", "expected [min, max] counts")

    seg_kw = _fill(SegNetConfig, top.get("segnet", {}), "segnet")
    if "widths" in seg_kw:
        w = seg_kw["widths"]
        if not w or not all(isinstance(x, int) and x > 0 for x in w):
            raise ConfigError("segnet.widths", "expected a nonempty list of positive ints")
    seg_kw.setdefault("n_classes", classes)
    if seg_kw["n_classes"] != classes or seg_kw.get("in_channels", 3) != 3:
        raise ConfigError("segnet", "n_classes must equal classes and in_channels must be 3")
    segnet = SegNetConfig(**seg_kw)
    div = 2 ** (segnet.levels - 1)
    if image_size[0] % div or image_size[1] % div:
        raise ConfigError("image_size", f"extents must be divisible by {div}")

    flow = FlowConfig(**_fill(FlowConfig, top.get("flow", {}), "flow"))
    try:
        flow.validate(classes)
    except BadConfig as exc:
        raise ConfigError("flow", str(exc)) from None
    fdiv = flow.input_pool * 2 ** flow.scales
    if image_size[0] % fdiv or image_size[1] % fdiv:
        raise ConfigError("flow", f"image extents must be divisible by {fdiv}")

    adapt = AdaptConfig(**_fill(AdaptConfig, top.get("adapt", {}), "adapt"))
    try:
        adapt.validate()
    except BadConfig as exc:
        raise ConfigError("adapt", str(exc)) from None
    for name, cfg in (("segnet", segnet), ("flow", flow), ("adapt", adapt)):
        if cfg.lr < 0 or cfg.batch < 1:
            raise ConfigError(name, "lr must be >= 0 and batch >= 1")

    return PipelineConfig(
        seed=seed, domains=domains, classes=classes, image_size=list(image_size),
        dataset=dataset, scene=scene, segnet=segnet, flow=flow, adapt=adapt,
        output_dir=top.get("output_dir", "runs/default"),
    )


def parse_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise MissingArtifact(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from None
    return parse_config_dict(doc)


def default_config_dict(seed=0):
    """The benchmark configuration: source plus three shifted targets."""
    from .datagen import default_domains

    doms = []
    for d in default_domains():
        entry = asdict(d)
        entry.pop("palette")
        doms.append(entry)
    return {"seed": seed, "domains": doms}


__all__ = ["PipelineConfig", "DatasetSizes", "parse_config", "parse_config_dict",
           "default_config_dict", "DEFAULT_PALETTE"]
