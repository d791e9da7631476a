"""File-based run configuration (YAML)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .backbone import BLOCK_COUNTS, BackboneSpec
from .datapipe import CocoDataset, JitterSpec, synth_shapes
from .detectors import DetectorConfig
from .heads import HeadConfig
from .losses import FocalParams
from .scaling import COARSEST_STRIDE, FAMILIES, RCNN, RETINANET, ScaleConfig, scale_config
from .training import TrainRecipe


class ConfigError(ValueError):
    """Validation failure; ``errors`` holds ``"field.path: message"`` strings."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


@dataclass
class ModelOptions:
    resolution: int | None = None
    depth: int | None = None
    width_multiplier: float = 1.0
    fpn_width: int = 256
    head_width: int = 256
    fc_width: int = 1024
    activation: str = "silu"
    stem: str = "d"
    use_se: bool = True
    se_ratio: float = 0.25
    with_masks: bool = False
    focal_alpha: float = 0.25
    focal_gamma: float = 1.5
    cascade_class_ensemble: bool = False
    score_thresh: float = 0.05
    nms_thresh: float = 0.5
    max_detections: int = 100


@dataclass
class DatasetOptions:
    kind: str = "synth"
    num_images: int = 8
    seed: int = 0
    image_size: int = 512
    annotations: str | None = None
    image_root: str | None = None
    eval_annotations: str | None = None
    eval_image_root: str | None = None


@dataclass
class RunConfig:
    family: str = RETINANET
    scale: int = 1
    head_variant: str = "regular"
    model: ModelOptions = field(default_factory=ModelOptions)
    recipe: TrainRecipe = field(default_factory=TrainRecipe.desk)
    dataset: DatasetOptions = field(default_factory=DatasetOptions)
    seed: int = 0
    output_dir: str = "runs/default"
    max_steps: int | None = None
    checkpoint_every: int = 0
    num_workers: int = 1

    @property
    def scale_config(self) -> ScaleConfig:
        base = scale_config(self.family, self.scale)
        res = self.model.resolution or base.resolution
        depth = self.model.depth or base.backbone_depth
        if (res, depth) == (base.resolution, base.backbone_depth):
            return base
        return ScaleConfig(self.family, None, res, depth)

    @property
    def resolution(self) -> int:
        return self.model.resolution or scale_config(self.family, self.scale).resolution

    def detector_config(self, num_classes: int) -> DetectorConfig:
        m = self.model
        sc = self.scale_config
        head = HeadConfig.variant(self.head_variant, conv_width=m.head_width, fc_width=m.fc_width,
                                  cascade_class_ensemble=m.cascade_class_ensemble)
        backbone = BackboneSpec(depth=sc.backbone_depth, se_ratio=m.se_ratio, stochastic_depth_init=self.recipe.sd_init,
                                activation=m.activation, stem=m.stem, use_se=m.use_se,
                                width_multiplier=m.width_multiplier)
        return DetectorConfig(family=self.family, num_classes=num_classes, image_size=sc.resolution,
                              backbone=backbone, fpn_width=m.fpn_width, head=head,
                              focal=FocalParams(m.focal_alpha, m.focal_gamma), with_masks=m.with_masks,
                              score_thresh=m.score_thresh, nms_thresh=m.nms_thresh,
                              max_detections=m.max_detections)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recipe"] = self.recipe.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        errors: list[str] = []
        if not isinstance(d, dict):
            raise ConfigError([f"<root>: expected a mapping, got {type(d).__name__}"])
        top = {f.name for f in fields(cls)}
        for k in d:
            if k not in top:
                errors.append(f"{k}: unknown field")
        kw = {k: v for k, v in d.items() if k in top}
        model = _sub(ModelOptions, d.get("model", {}), "model", errors)
        dataset = _sub(DatasetOptions, d.get("dataset", {}), "dataset", errors)
        recipe = None
        rd = dict(d.get("recipe", {}) or {})
        try:
            if "jitter" not in rd:
                res = model.resolution if model and model.resolution else _table_resolution(
                    kw.get("family", RETINANET), kw.get("scale", 1))
                rd["jitter"] = {"target_size": res or 640, "scale_range": [0.1, 2.0]}
            base = TrainRecipe.desk().to_dict()
            base.update(rd)
            recipe = TrainRecipe.from_dict(base)
        except (TypeError, ValueError, KeyError) as e:
            errors.append(f"recipe: {e}")
        if errors:
            raise ConfigError(errors)
        kw.update(model=model, dataset=dataset, recipe=recipe)
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self) -> "RunConfig":
        errors = []
        if self.family not in FAMILIES:
            errors.append(f"family: {self.family!r} is not one of {list(FAMILIES)}")
        else:
            try:
                scale_config(self.family, self.scale)
            except ValueError as e:
                errors.append(f"scale: {e}")
        if self.head_variant not in ("regular", "heavy"):
            errors.append(f"head_variant: {self.head_variant!r} is not 'regular' or 'heavy'")
        elif self.head_variant == "heavy" and self.family != RCNN:
            errors.append(f"head_variant: the heavy head variant is only defined for the {RCNN} family")
        res = self.model.resolution
        if res is not None and (res <= 0 or res % COARSEST_STRIDE):
            errors.append(f"model.resolution: {res} is not a positive multiple of {COARSEST_STRIDE} "
                          f"(the P7 stride)")
        if self.model.depth is not None and self.model.depth not in BLOCK_COUNTS:
            errors.append(f"model.depth: {self.model.depth} not in {sorted(BLOCK_COUNTS)}")
        if self.model.activation not in ("silu", "relu"):
            errors.append(f"model.activation: {self.model.activation!r} is not 'silu' or 'relu'")
        if self.model.stem not in ("d", "vanilla"):
            errors.append(f"model.stem: {self.model.stem!r} is not 'd' or 'vanilla'")
        if self.model.with_masks and self.family != RCNN:
            errors.append(f"model.with_masks: masks need the {RCNN} family")
        if self.dataset.kind not in ("synth", "coco"):
            errors.append(f"dataset.kind: {self.dataset.kind!r} is not 'synth' or 'coco'")
        if self.dataset.kind == "coco" and not self.dataset.annotations:
            errors.append("dataset.annotations: required when dataset.kind is 'coco'")
        if not errors and self.recipe.jitter.target_size != self.resolution:
            errors.append(f"recipe.jitter.target_size: {self.recipe.jitter.target_size} must equal the model "
                          f"resolution {self.resolution}")
        if self.recipe.batch_size < 1:
            errors.append("recipe.batch_size: must be >= 1")
        if self.num_workers < 1:
            errors.append("num_workers: must be >= 1")
        if errors:
            raise ConfigError(errors)
        return self


def _table_resolution(family, scale):
    try:
        return scale_config(family, scale).resolution
    except ValueError:
        return None


def _sub(cls, d, path, errors):
    if d is None:
        d = {}
    if not isinstance(d, dict):
        errors.append(f"{path}: expected a mapping")
        return None
    names = {f.name for f in fields(cls)}
    for k in d:
        if k not in names:
            errors.append(f"{path}.{k}: unknown field")
    try:
        return cls(**{k: v for k, v in d.items() if k in names})
    except (TypeError, ValueError) as e:
        errors.append(f"{path}: {e}")
        return None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as e:
        raise ConfigError([f"<file>: cannot read {path}: {e}"]) from e
    except yaml.YAMLError as e:
        raise ConfigError([f"<file>: {path} is not valid YAML: {e}"]) from e
    return RunConfig.from_dict(data or {})


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def save_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg))
    return path


def table_run_config(family: str, scale: int) -> RunConfig:
    """Full-size COCO run for one scaling-table row with the 600-epoch recipe."""
    sc = scale_config(family, scale)
    recipe = TrainRecipe.coco(jitter=JitterSpec(sc.resolution, (0.1, 2.0)))
    return RunConfig(
        family=family, scale=scale, recipe=recipe,
        dataset=DatasetOptions(kind="coco", annotations="coco/annotations/instances_train2017.json",
                               image_root="coco/train2017",
                               eval_annotations="coco/annotations/instances_val2017.json",
                               eval_image_root="coco/val2017"),
        output_dir=f"runs/{sc.config_id}",
    ).validate()


def build_dataset(cfg: RunConfig, split: str = "train"):
    """Dataset named by ``cfg.dataset``; ``split="eval"`` prefers the eval annotation file."""
    ds = cfg.dataset
    if ds.kind == "synth":
        # eval reuses the same synthetic images
        return synth_shapes(ds.num_images, seed=ds.seed, image_size=ds.image_size)
    if split == "eval" and ds.eval_annotations:
        return CocoDataset(ds.eval_annotations, ds.eval_image_root, with_masks=cfg.model.with_masks)
    return CocoDataset(ds.annotations, ds.image_root, with_masks=cfg.model.with_masks)


ABLATION_STEPS = ("baseline", "float16", "jitter_350ep", "stochastic_depth_600ep", "silu", "squeeze_excite",
                  "resnet_d_stem")


def ablation_run_configs() -> list[tuple[str, RunConfig, str]]:
    """Cumulative RetinaNet R50 @ 640 ablation: ``(step, config, inference precision)``.

    Starts from a ReLU, SE-free, 7x7-stem model trained 90 epochs without
    scale jitter or stochastic depth, then switches on one change per step.
    """
    base = table_run_config(RETINANET, 3)
    jitter = base.recipe.jitter
    state = dict(
        model=ModelOptions(activation="relu", use_se=False, stem="vanilla"),
        recipe=replace(base.recipe, epochs=90, sd_init=0.0, jitter=JitterSpec(jitter.target_size, (1.0, 1.0))),
    )
    precision = "single"
    out = []
    for step in ABLATION_STEPS:
        if step == "float16":
            precision = "half"
        elif step == "jitter_350ep":
            state["recipe"] = replace(state["recipe"], epochs=350, jitter=JitterSpec(jitter.target_size, (0.1, 2.0)))
        elif step == "stochastic_depth_600ep":
            state["recipe"] = replace(state["recipe"], epochs=600, sd_init=0.2)
        elif step == "silu":
            state["model"] = replace(state["model"], activation="silu")
        elif step == "squeeze_excite":
            state["model"] = replace(state["model"], use_se=True)
        elif step == "resnet_d_stem":
            state["model"] = replace(state["model"], stem="d")
        cfg = replace(base, output_dir=f"runs/ablation/{step}", **state).validate()
        out.append((step, cfg, precision))
    return out
