"""RetinaNet-RS / RCNN-RS scaling rows and the depth x resolution grid.

Scaling only changes the input resolution and the ResNet depth. The rows are
stored as data so they can be pinned against a golden file.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

RETINANET = "retinanet_rs"
RCNN = "rcnn_rs"
FAMILIES = (RETINANET, RCNN)

# scale label -> (resolution, depth). RetinaNet-RS has no scale 2.
RETINANET_RS_ROWS = {
    1: (512, 50),
    3: (640, 50),
    4: (640, 101),
    5: (768, 101),
    6: (768, 152),
}
RCNN_RS_ROWS = {
    1: (512, 50),
    2: (640, 50),
    3: (768, 50),
    4: (768, 101),
    5: (896, 101),
    6: (896, 152),
    7: (1024, 152),
    8: (1280, 152),
    9: (1280, 200),
}
_ROWS = {RETINANET: RETINANET_RS_ROWS, RCNN: RCNN_RS_ROWS}

SWEEP_DEPTHS = (50, 101, 152, 200)
SWEEP_RESOLUTIONS = (512, 640, 768, 896, 1024, 1280)
COARSEST_STRIDE = 128


@dataclass(frozen=True)
class ScaleConfig:
    """One (family, scale label, resolution, depth) row.

    ``scale_label`` is ``None`` for grid points that are not table rows.
    """

    family: str
    scale_label: int | None
    resolution: int
    backbone_depth: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.resolution % COARSEST_STRIDE:
            raise ValueError(f"resolution {self.resolution} is not divisible by {COARSEST_STRIDE}")
        if self.scale_label is not None:
            row = _ROWS[self.family].get(self.scale_label)
            if row != (self.resolution, self.backbone_depth):
                raise ValueError(f"{self.family} scale {self.scale_label} is not a published row")

    @property
    def config_id(self) -> str:
        tag = f"s{self.scale_label}" if self.scale_label is not None else "grid"
        return f"{self.family}-{tag}-r{self.backbone_depth}-{self.resolution}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScaleConfig":
        return cls(d["family"], d.get("scale_label"), int(d["resolution"]), int(d["backbone_depth"]))


def _lookup(family: str, scale: int) -> ScaleConfig:
    rows = _ROWS[family]
    if scale not in rows:
        raise ValueError(f"{family} has no scale {scale}; valid scales are {sorted(rows)}")
    res, depth = rows[scale]
    return ScaleConfig(family, scale, res, depth)


def retinanet_rs_config(scale: int) -> ScaleConfig:
    return _lookup(RETINANET, scale)


def rcnn_rs_config(scale: int) -> ScaleConfig:
    return _lookup(RCNN, scale)


def scale_config(family: str, scale: int) -> ScaleConfig:
    if family not in _ROWS:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    return _lookup(family, scale)


def all_table_rows() -> list[ScaleConfig]:
    return [_lookup(f, s) for f in FAMILIES for s in sorted(_ROWS[f])]


def sweep_grid(depths, resolutions, family: str = RCNN) -> list[ScaleConfig]:
    """Depth-major, resolution-minor cross product."""
    for d in depths:
        if d not in SWEEP_DEPTHS:
            raise ValueError(f"depth {d} not in {SWEEP_DEPTHS}")
    return [ScaleConfig(family, None, int(r), int(d)) for d in depths for r in resolutions]
