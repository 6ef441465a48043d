"""Per-object scene annotations: direction, distance, occlusion, visibility.

All areas come from one rasteriser: a polygon covers a lattice cell when the
cell centre lies inside it under the even-odd rule.  The lattice is anchored
at the image origin with ``resolution`` cells per pixel, so at resolution 1
cells are exactly the image pixels and two polygons are always rasterised on
the same grid.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from .numerics import read_matrix
from .pnm import read_pgm

DIRECTIONS = ("front", "front-left", "left", "back-left", "back", "back-right", "right", "front-right")
VISIBILITY_NAMES = {1: "low visibility", 2: "medium visibility", 3: "high visibility", 4: "fully visible"}
SUBSETS = ("N", "O", "D")


class GeometryError(ValueError):
    pass


class DegenerateGeometryError(GeometryError):
    pass


class EmptyRegionError(GeometryError):
    pass


class SchemaError(ValueError):
    """Annotation input does not match the expected layout; ``pointer`` locates the problem."""

    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


# ---------------------------------------------------------------------------
# directions


def wrap_angle(angle: float) -> float:
    """Map to (-pi, pi]."""
    a = math.remainder(angle, 2 * math.pi)
    return math.pi if a == -math.pi else a


def direction_label(angle: float) -> str:
    """Eight 45-degree sectors; ``front`` is [-22.5, 22.5) and boundaries go counter-clockwise."""
    deg = math.degrees(wrap_angle(angle))
    return DIRECTIONS[math.floor((deg + 22.5) / 45.0) % 8]


# ---------------------------------------------------------------------------
# polygons and rasterisation


def _segments_cross(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return int(v > 0) - int(v < 0)

    def on_seg(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    o1, o2, o3, o4 = orient(p1, p2, p3), orient(p1, p2, p4), orient(p3, p4, p1), orient(p3, p4, p2)
    if o1 != o2 and o3 != o4:
        return True
    return ((o1 == 0 and on_seg(p1, p2, p3)) or (o2 == 0 and on_seg(p1, p2, p4))
            or (o3 == 0 and on_seg(p3, p4, p1)) or (o4 == 0 and on_seg(p3, p4, p2)))


@dataclass
class PolygonRegion:
    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2:
            raise GeometryError(f"vertices must be (n, 2), got {v.shape}")
        if len(v) >= 2 and np.array_equal(v[0], v[-1]):
            v = v[:-1]
        if len(v) < 3:
            raise GeometryError("a polygon needs at least 3 vertices")
        if not np.all(np.isfinite(v)):
            raise GeometryError("vertices must be finite")
        self.vertices = v
        n = len(v)
        for i in range(n):
            for j in range(i + 1, n):
                if j == i + 1 or (i == 0 and j == n - 1):
                    continue
                if _segments_cross(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]):
                    raise GeometryError(f"polygon is not simple: edges {i} and {j} intersect")

    @property
    def bottom(self) -> float:
        """Largest v (image rows grow downward), the lowest point on screen."""
        return float(self.vertices[:, 1].max())

    def centroid_u(self) -> float:
        return float(self.vertices[:, 0].mean())

    def contains(self, u, v) -> np.ndarray:
        """Even-odd test for arrays of points."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        inside = np.zeros(np.broadcast(u, v).shape, dtype=bool)
        pts = self.vertices
        for (x1, y1), (x2, y2) in zip(pts, np.roll(pts, -1, axis=0)):
            if y1 == y2:
                continue
            straddle = (y1 > v) != (y2 > v)
            x_cross = x1 + (v - y1) * (x2 - x1) / (y2 - y1)
            inside ^= straddle & (u < x_cross)
        return inside


def _cell_range(lo: float, hi: float, resolution: int) -> tuple[int, int]:
    """Integer cells whose centres can fall in [lo, hi]."""
    return math.floor(lo * resolution) - 1, math.ceil(hi * resolution) + 1


def raster_cells(regions: Sequence[PolygonRegion], resolution: int = 1):
    """Masks of each region on a shared lattice covering all of them.

    Returns ``(masks, (i0, j0))`` where ``masks[n][j - j0, i - i0]`` says whether
    cell ``(i, j)`` (centre ``((i + .5) / r, (j + .5) / r)``) lies in region ``n``.
    """
    if resolution < 1:
        raise ValueError("resolution must be a positive integer")
    allv = np.concatenate([r.vertices for r in regions])
    i0, i1 = _cell_range(allv[:, 0].min(), allv[:, 0].max(), resolution)
    j0, j1 = _cell_range(allv[:, 1].min(), allv[:, 1].max(), resolution)
    cu = (np.arange(i0, i1 + 1) + 0.5) / resolution
    cv = (np.arange(j0, j1 + 1) + 0.5) / resolution
    uu, vv = np.meshgrid(cu, cv)
    return [r.contains(uu, vv) for r in regions], (i0, j0)


@dataclass(frozen=True)
class Overlap:
    intersection: float
    area_a: float
    area_b: float
    fraction_a: float
    fraction_b: float
    iou: float


def polygon_overlap(a: PolygonRegion, b: PolygonRegion, resolution: int = 1) -> Overlap:
    (ma, mb), _ = raster_cells([a, b], resolution)
    cell = 1.0 / (resolution * resolution)
    na, nb, ni = int(ma.sum()), int(mb.sum()), int((ma & mb).sum())
    if na == 0 or nb == 0:
        raise DegenerateGeometryError("polygon covers no raster cell at this resolution")
    return Overlap(ni * cell, na * cell, nb * cell, ni / na, ni / nb, ni / (na + nb - ni))


# ---------------------------------------------------------------------------
# depth


@dataclass
class DepthMap:
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"depth map must be 2-D, got {v.shape}")
        v[~(v > 0)] = np.nan  # non-positive and non-finite readings are invalid
        v[np.isinf(v)] = np.nan
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_pgm(cls, path, scale: float | None = None) -> "DepthMap":
        """16-bit (or 8-bit) PGM; meters per unit from ``scale`` or a ``<path>.json`` sidecar."""
        raw, _ = read_pgm(path)
        if scale is None:
            sidecar = Path(str(path) + ".json")
            if not sidecar.exists():
                sidecar = Path(path).with_suffix(".json")
            scale = float(json.loads(sidecar.read_text())["scale"])
        return cls(raw.astype(np.float64) * scale)

    @classmethod
    def from_matrix(cls, path) -> "DepthMap":
        return cls(read_matrix(path))

    @classmethod
    def load(cls, path) -> "DepthMap":
        return cls.from_pgm(path) if Path(path).suffix.lower() == ".pgm" else cls.from_matrix(path)


def mean_depth(region: PolygonRegion, depth: DepthMap) -> float:
    """Mean of valid depth over pixels whose centres lie inside the region."""
    v = region.vertices
    c0 = max(0, math.floor(v[:, 0].min()))
    c1 = min(depth.width, math.ceil(v[:, 0].max()) + 1)
    r0 = max(0, math.floor(v[:, 1].min()))
    r1 = min(depth.height, math.ceil(v[:, 1].max()) + 1)
    if c0 >= c1 or r0 >= r1:
        raise EmptyRegionError("region does not intersect the depth map")
    uu, vv = np.meshgrid(np.arange(c0, c1) + 0.5, np.arange(r0, r1) + 0.5)
    vals = depth.values[r0:r1, c0:c1][region.contains(uu, vv)]
    vals = vals[~np.isnan(vals)]
    if vals.size == 0:
        raise EmptyRegionError("no valid depth pixel inside the region")
    return math.fsum(vals.tolist()) / vals.size


# ---------------------------------------------------------------------------
# occlusion and visibility


def _id_key(obj_id):
    return (0, obj_id, "") if isinstance(obj_id, int) else (1, 0, str(obj_id))


def is_occluder(bottom_a: float, id_a, bottom_b: float, id_b) -> bool:
    """Whether ``a`` occludes ``b``: the smaller bottom-most v wins, ties go to the lower id."""
    if bottom_a != bottom_b:
        return bottom_a < bottom_b
    return _id_key(id_a) < _id_key(id_b)


@dataclass(frozen=True)
class OcclusionRelation:
    occluder: object
    occluded: object
    overlap_fraction: float
    iou: float

    def __post_init__(self):
        if self.occluder == self.occluded:
            raise ValueError("an object cannot occlude itself")
        if not 0 < self.overlap_fraction <= 1:
            raise ValueError("overlap fraction must be in (0, 1]")

    @property
    def visible_fraction(self) -> float:
        return 1.0 - self.overlap_fraction


def occlusion_order(a: PolygonRegion, b: PolygonRegion, id_a=0, id_b=1, resolution: int = 1):
    """Occlusion relation between two regions, or ``None`` when they do not overlap."""
    ov = polygon_overlap(a, b, resolution)
    if ov.intersection == 0:
        return None
    if is_occluder(a.bottom, id_a, b.bottom, id_b):
        return OcclusionRelation(id_a, id_b, ov.fraction_b, ov.iou)
    return OcclusionRelation(id_b, id_a, ov.fraction_a, ov.iou)


_BUCKET_EDGES = (0.40, 0.60, 0.80)


def visibility_bucket(fraction: float) -> int:
    """1: [0, .4), 2: [.4, .6), 3: [.6, .8), 4: [.8, 1]."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"visible fraction {fraction} outside [0, 1]")
    return 1 + sum(fraction >= e for e in _BUCKET_EDGES)


# ---------------------------------------------------------------------------
# quadruples


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


@dataclass(frozen=True)
class ObjectQuadruple:
    category: str
    direction: str
    distance: float
    visibility: int | None = None
    speed: float | None = None

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.distance < 0:
            raise ValueError("distance must be non-negative")
        if (self.visibility is None) == (self.speed is None):
            raise ValueError("exactly one of visibility and speed must be set")
        if self.visibility is not None and self.visibility not in VISIBILITY_NAMES:
            raise ValueError(f"visibility bucket {self.visibility} not in 1..4")

    @property
    def rounded_distance(self) -> int:
        return round_half_away(self.distance)

    def as_tuple(self):
        fourth = self.visibility if self.visibility is not None else self.speed
        return (self.category, self.direction, self.rounded_distance, fourth)

    def describe(self) -> str:
        where = self.direction.replace("-", " ")
        if self.visibility is not None:
            return (f"a {VISIBILITY_NAMES[self.visibility]} {self.category} in the {where} "
                    f"around {self.rounded_distance} meters")
        return (f"a {self.category} in the {where} around {self.rounded_distance} meters "
                f"moving at {self.speed:g} meters per second")

    def to_json(self) -> dict:
        out = {"category": self.category, "direction": self.direction,
               "distance": self.rounded_distance, "distance_m": self.distance}
        if self.visibility is not None:
            out["visibility"] = self.visibility
        else:
            out["speed"] = self.speed
        out["text"] = self.describe()
        return out


@dataclass
class SceneObject:
    id: object
    category: str
    polygon: PolygonRegion | None = None
    position: tuple[float, float, float] | None = None
    speed: float | None = None
    visibility: int | None = None


def build_quadruple(
    obj: SceneObject,
    ego_heading: float = 0.0,
    depth: DepthMap | None = None,
    subset: str = "N",
    visible_fraction: float | None = None,
    image_width: int | None = None,
    _where: str = "",
) -> ObjectQuadruple:
    """Assemble the quadruple for one object.

    Direction comes from the ego-relative position when present, otherwise
    from the panorama longitude of the polygon centroid.  Distance is the
    position norm (N, D) or the region's mean depth (O).
    """
    if subset not in SUBSETS:
        raise ValueError(f"subset must be one of {SUBSETS}, got {subset!r}")

    def need(value, name):
        if value is None:
            raise SchemaError(f"{_where}/{name}", f"required for subset {subset}")
        return value

    if subset == "O":
        poly = need(obj.polygon, "polygon")
        if depth is None:
            raise SchemaError("/depth", "subset O needs a depth map")
        distance = mean_depth(poly, depth)
    else:
        distance = float(np.linalg.norm(need(obj.position, "position")))

    if obj.position is not None:
        x, y = obj.position[0], obj.position[1]
        angle = math.atan2(y, x) - ego_heading
    else:
        poly = need(obj.polygon, "polygon")
        width = image_width or (depth.width if depth is not None else None)
        if width is None:
            raise SchemaError("/image/width", "needed to place a polygon-only object")
        angle = poly.centroid_u() / width * 2 * math.pi - math.pi - ego_heading
    direction = direction_label(angle)

    if subset == "D":
        return ObjectQuadruple(obj.category, direction, distance, speed=float(need(obj.speed, "speed")))
    if visible_fraction is not None:
        bucket = visibility_bucket(visible_fraction)
    elif obj.visibility is not None:
        bucket = obj.visibility
    else:
        bucket = 4
    return ObjectQuadruple(obj.category, direction, distance, visibility=bucket)


# ---------------------------------------------------------------------------
# frames

_NUM = {"type": "number"}
FRAME_SCHEMA = {
    "type": "object",
    "required": ["objects"],
    "properties": {
        "objects": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "category"],
                "properties": {
                    "id": {"type": ["integer", "string"]},
                    "category": {"type": "string", "minLength": 1},
                    "polygon": {"type": "array", "minItems": 3,
                                "items": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}},
                    "position": {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3},
                    "speed": _NUM,
                    "visibility": {"type": "integer", "minimum": 1, "maximum": 4},
                },
            },
        },
        "ego": {"type": "object", "properties": {"heading": _NUM}},
        "image": {"type": "object", "properties": {"width": {"type": "integer", "minimum": 1},
                                                   "height": {"type": "integer", "minimum": 1}}},
    },
}


def _pointer(path) -> str:
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in path)


def validate_frame(frame) -> None:
    err = jsonschema.exceptions.best_match(jsonschema.Draft7Validator(FRAME_SCHEMA).iter_errors(frame))
    if err is None:
        return
    path = list(err.absolute_path)
    if err.validator == "required" and isinstance(err.instance, dict):
        missing = [k for k in err.validator_value if k not in err.instance]
        path += missing[:1]
    raise SchemaError(_pointer(path), err.message)


def parse_objects(frame) -> list[SceneObject]:
    validate_frame(frame)
    out = []
    ids = set()
    for n, o in enumerate(frame["objects"]):
        if o["id"] in ids:
            raise SchemaError(f"/objects/{n}/id", f"duplicate id {o['id']!r}")
        ids.add(o["id"])
        try:
            poly = PolygonRegion(o["polygon"]) if "polygon" in o else None
        except GeometryError as exc:
            raise SchemaError(f"/objects/{n}/polygon", str(exc)) from None
        pos = tuple(float(c) for c in o["position"]) if "position" in o else None
        out.append(SceneObject(o["id"], o["category"], poly, pos, o.get("speed"), o.get("visibility")))
    return out


@dataclass
class FrameAnnotation:
    quadruples: list[tuple[object, ObjectQuadruple]] = field(default_factory=list)
    occlusions: list[OcclusionRelation] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "quadruples": [{"id": i, **q.to_json()} for i, q in self.quadruples],
            "occlusions": [
                {"occluder": r.occluder, "occluded": r.occluded,
                 "visible_fraction": r.visible_fraction, "iou": r.iou}
                for r in self.occlusions
            ],
        }


def annotate_frame(frame: dict, subset: str = "N", depth: DepthMap | None = None, resolution: int = 1) -> FrameAnnotation:
    objects = parse_objects(frame)
    heading = float(frame.get("ego", {}).get("heading", 0.0))
    width = frame.get("image", {}).get("width")
    relations: list[OcclusionRelation] = []
    visible: dict[object, float] = {}

    polys = [(o.id, o.polygon) for o in objects if o.polygon is not None]
    if subset == "O" and polys:
        masks, _ = raster_cells([p for _, p in polys], resolution)
        hidden = [np.zeros_like(m) for m in masks]
        for a in range(len(polys)):
            for b in range(a + 1, len(polys)):
                inter = masks[a] & masks[b]
                if not inter.any():
                    continue
                rel = occlusion_order(polys[a][1], polys[b][1], polys[a][0], polys[b][0], resolution)
                relations.append(rel)
                hidden[b if rel.occluded == polys[b][0] else a] |= inter
        for (oid, _), m, hid in zip(polys, masks, hidden):
            if m.any():
                visible[oid] = 1.0 - int(hid.sum()) / int(m.sum())

    result = FrameAnnotation(occlusions=relations)
    for n, o in enumerate(objects):
        q = build_quadruple(o, heading, depth, subset, visible.get(o.id), width, _where=f"/objects/{n}")
        result.quadruples.append((o.id, q))
    return result
