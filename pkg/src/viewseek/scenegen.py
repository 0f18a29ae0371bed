"""Procedural rooms of oriented cuboids, navigability grid, A* and instruction templates."""

from __future__ import annotations

import heapq
import itertools
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .geomcore import OrientedBox3D, clip_convex, convex_polygon_distance, polygon_signed_area

FORMAT_VERSION = 1
_scene_ids = itertools.count(1)


class TaskType(str, Enum):
    GROUNDING = "grounding"
    SEGMENTATION = "segmentation"
    BOX3D = "box3d"

    @property
    def index(self) -> int:
        return TASK_TYPES.index(self)


TASK_TYPES = (TaskType.GROUNDING, TaskType.SEGMENTATION, TaskType.BOX3D)

# Instruction grammar: "{verb} the {attrs} {class} [next to the {landmark}]"
TASK_VERBS = {
    TaskType.GROUNDING: "locate",
    TaskType.SEGMENTATION: "segment",
    TaskType.BOX3D: "estimate the 3D box of",
}
LANDMARK_JOINER = " next to the "

# full (width, height, depth) ranges in meters
DEFAULT_CLASSES: dict[str, tuple[tuple[float, float], tuple[float, float], tuple[float, float]]] = {
    "chair": ((0.45, 0.6), (0.8, 1.0), (0.45, 0.6)),
    "table": ((0.9, 1.5), (0.7, 0.8), (0.6, 1.0)),
    "sofa": ((1.5, 2.1), (0.8, 0.95), (0.8, 1.0)),
    "lamp": ((0.25, 0.4), (1.2, 1.7), (0.25, 0.4)),
    "cabinet": ((0.7, 1.1), (1.0, 1.8), (0.4, 0.6)),
    "bookshelf": ((0.8, 1.2), (1.5, 2.0), (0.3, 0.4)),
    "plant": ((0.3, 0.5), (0.6, 1.3), (0.3, 0.5)),
    "desk": ((1.0, 1.4), (0.72, 0.78), (0.6, 0.8)),
    "stool": ((0.35, 0.45), (0.45, 0.7), (0.35, 0.45)),
    "crate": ((0.4, 0.7), (0.3, 0.6), (0.4, 0.7)),
    "fridge": ((0.65, 0.8), (1.6, 1.9), (0.65, 0.75)),
}
DEFAULT_COLORS = ("red", "blue", "green", "white", "black", "brown", "gray", "yellow")
DEFAULT_SIZES = ("small", "large")


class SceneFormatError(ValueError):
    """Malformed or inconsistent scene file."""


@dataclass(frozen=True)
class SceneConfig:
    room_size_range: tuple[float, float] = (5.0, 8.0)
    object_count_range: tuple[int, int] = (5, 10)
    classes: dict = field(default_factory=lambda: dict(DEFAULT_CLASSES))
    colors: tuple[str, ...] = DEFAULT_COLORS
    sizes: tuple[str, ...] = DEFAULT_SIZES
    cell_size: float = 0.25
    agent_radius: float = 0.15
    wall_height: float = 2.5
    min_separation: float = 0.05
    landmark_radius: float = 2.0
    placement_tries: int = 300

    def __post_init__(self) -> None:
        if not self.classes:
            raise ValueError("class vocabulary must be nonempty")
        lo, hi = self.room_size_range
        if not 0 < lo <= hi:
            raise ValueError("room_size_range must be positive and ordered")
        clo, chi = self.object_count_range
        if not 0 <= clo <= chi:
            raise ValueError("object_count_range must be nonnegative and ordered")


@dataclass(frozen=True)
class SceneObject:
    id: int
    class_name: str
    attributes: tuple[str, ...]
    box: OrientedBox3D
    nearest_landmark_id: Optional[int] = None

    def __post_init__(self) -> None:
        if self.id <= 0:
            raise ValueError("object ids must be positive (0 is background)")
        object.__setattr__(self, "attributes", tuple(self.attributes))

    @property
    def phrase(self) -> str:
        return " ".join((*self.attributes, self.class_name))


@dataclass(frozen=True, eq=False)
class Scene:
    bounds: tuple[float, float, float, float]  # xmin, zmin, xmax, zmax
    objects: tuple[SceneObject, ...]
    nav_grid: np.ndarray  # bool [nx, nz], True = navigable
    cell_size: float
    seed: int
    agent_radius: float = 0.15
    wall_height: float = 2.5
    metadata: dict = field(default_factory=dict)
    # process-unique token used as a cache key by the renderer
    uid: int = field(default_factory=lambda: next(_scene_ids), init=False, repr=False)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.bounds == other.bounds
            and self.objects == other.objects
            and self.nav_grid.shape == other.nav_grid.shape
            and bool(np.array_equal(self.nav_grid, other.nav_grid))
            and self.cell_size == other.cell_size
            and self.seed == other.seed
            and self.agent_radius == other.agent_radius
            and self.wall_height == other.wall_height
            and self.metadata == other.metadata
        )

    __hash__ = object.__hash__

    def object_by_id(self, oid: int) -> SceneObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(f"no object with id {oid}")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.nav_grid.shape

    def cell_of(self, x: float, z: float) -> tuple[int, int]:
        return (int(math.floor((x - self.bounds[0]) / self.cell_size + 1e-9)),
                int(math.floor((z - self.bounds[1]) / self.cell_size + 1e-9)))

    def cell_center(self, cell: tuple[int, int]) -> tuple[float, float]:
        return (self.bounds[0] + (cell[0] + 0.5) * self.cell_size,
                self.bounds[1] + (cell[1] + 0.5) * self.cell_size)

    def in_grid(self, cell: tuple[int, int]) -> bool:
        nx, nz = self.nav_grid.shape
        return 0 <= cell[0] < nx and 0 <= cell[1] < nz

    def navigable(self, cell: tuple[int, int]) -> bool:
        return self.in_grid(cell) and bool(self.nav_grid[cell])

    def wall_boxes(self, thickness: float = 0.2) -> list[OrientedBox3D]:
        x0, z0, x1, z1 = self.bounds
        h = self.wall_height / 2.0
        t = thickness / 2.0
        wx, wz = (x1 - x0) / 2.0 + thickness, (z1 - z0) / 2.0 + thickness
        cx, cz = (x0 + x1) / 2.0, (z0 + z1) / 2.0
        return [
            OrientedBox3D((cx, h, z0 - t), (wx, h, t)),
            OrientedBox3D((cx, h, z1 + t), (wx, h, t)),
            OrientedBox3D((x0 - t, h, cz), (t, h, wz)),
            OrientedBox3D((x1 + t, h, cz), (t, h, wz)),
        ]


# ------------------------------------------------------------ nav grid


def _seg_dist(a, b, x):
    """Distance from points ``x`` to segments ``a``-``b`` (all broadcast, last axis 2)."""
    ab = b - a
    t = np.clip(np.sum((x - a) * ab, -1) / np.maximum(np.sum(ab * ab, -1), 1e-300), 0, 1)
    return np.linalg.norm(a + t[..., None] * ab - x, axis=-1)


def _cells_footprint_distance(bounds, shape, cell: float, poly: np.ndarray,
                              cutoff: float = math.inf) -> np.ndarray:
    """Distance from every grid cell square to a convex polygon, shape ``shape``.

    Exact wherever the true distance is below ``cutoff``; farther cells get the
    gap between bounding boxes, a lower bound that is itself at least ``cutoff``.
    """
    nx, nz = shape
    ix, iz = np.meshgrid(np.arange(nx), np.arange(nz), indexing="ij")
    x0 = bounds[0] + ix.ravel() * cell
    z0 = bounds[1] + iz.ravel() * cell
    lo, hi = poly.min(0), poly.max(0)
    gx = np.maximum(np.maximum(lo[0] - (x0 + cell), x0 - hi[0]), 0.0)
    gz = np.maximum(np.maximum(lo[1] - (z0 + cell), z0 - hi[1]), 0.0)
    best = np.hypot(gx, gz)
    near = best < cutoff
    x0, z0 = x0[near], z0[near]
    sq = np.stack([
        np.stack([x0, z0], 1), np.stack([x0 + cell, z0], 1),
        np.stack([x0 + cell, z0 + cell], 1), np.stack([x0, z0 + cell], 1),
    ], axis=1)  # (n, 4, 2)

    # separating-axis test: cell axes (x, z) and polygon edge normals
    overlap = np.ones(len(sq), dtype=bool)
    nxt = np.roll(poly, -1, axis=0)
    edges = nxt - poly
    axes = np.concatenate([np.eye(2), np.stack([-edges[:, 1], edges[:, 0]], 1)])
    for ax in axes:
        ps = sq @ ax
        pp = poly @ ax
        overlap &= ~((ps.max(1) < pp.min()) | (pp.max() < ps.min(1)))

    # square vertices against polygon edges, then polygon vertices against square edges
    d1 = _seg_dist(poly[None, None], nxt[None, None], sq[:, :, None]).min(axis=(1, 2))
    sq_next = np.roll(sq, -1, axis=1)
    d2 = _seg_dist(sq[:, :, None], sq_next[:, :, None], poly[None, None]).min(axis=(1, 2))
    exact = np.minimum(d1, d2)
    exact[overlap] = 0.0
    best[near] = exact
    return best.reshape(shape)


def compute_nav_grid(bounds, cell_size: float, agent_radius: float,
                     boxes: list[OrientedBox3D]) -> np.ndarray:
    nx = int(round((bounds[2] - bounds[0]) / cell_size))
    nz = int(round((bounds[3] - bounds[1]) / cell_size))
    grid = np.ones((nx, nz), dtype=bool)
    for box in boxes:
        d = _cells_footprint_distance(bounds, (nx, nz), cell_size, box.footprint(), agent_radius)
        grid &= d >= agent_radius
    return grid


def largest_component(grid: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(grid)  # default structure is 4-connected
    if n == 0:
        return np.zeros_like(grid)
    sizes = ndimage.sum(grid, labels, index=np.arange(1, n + 1))
    return labels == (int(np.argmax(sizes)) + 1)


# ------------------------------------------------------------ generation


def _sample_attributes(rng: np.random.Generator, cfg: SceneConfig) -> tuple[str, ...]:
    attrs: list[str] = []
    if cfg.sizes and rng.random() < 0.3:
        attrs.append(cfg.sizes[int(rng.integers(len(cfg.sizes)))])
    if cfg.colors and rng.random() < 0.8:
        attrs.append(cfg.colors[int(rng.integers(len(cfg.colors)))])
    return tuple(attrs)


def generate_scene(seed: int, config: Optional[SceneConfig] = None) -> Scene:
    cfg = config or SceneConfig()
    rng = np.random.default_rng(seed)
    cell = cfg.cell_size
    lo, hi = cfg.room_size_range
    # room sides snap to the grid so cells tile the floor exactly
    lx = max(cell, round(rng.uniform(lo, hi) / cell) * cell)
    lz = max(cell, round(rng.uniform(lo, hi) / cell) * cell)
    bounds = (0.0, 0.0, float(lx), float(lz))
    n_target = int(rng.integers(cfg.object_count_range[0], cfg.object_count_range[1] + 1))
    class_names = sorted(cfg.classes)

    placed: list[tuple[str, tuple[str, ...], OrientedBox3D]] = []
    free = compute_nav_grid(bounds, cell, cfg.agent_radius, [])
    used: set[tuple[str, tuple[str, ...]]] = set()
    tries = 0
    while len(placed) < n_target and tries < cfg.placement_tries:
        tries += 1
        cname = class_names[int(rng.integers(len(class_names)))]
        attrs = _sample_attributes(rng, cfg)
        if (cname, attrs) in used:
            continue
        (w0, w1), (h0, h1), (d0, d1) = cfg.classes[cname]
        w, h, d = rng.uniform(w0, w1), rng.uniform(h0, h1), rng.uniform(d0, d1)
        yaw = float(rng.integers(0, 36)) * 5.0
        cx, cz = rng.uniform(0.0, lx), rng.uniform(0.0, lz)
        box = OrientedBox3D((float(cx), float(h / 2.0), float(cz)), (w / 2.0, h / 2.0, d / 2.0), yaw)
        fp = box.footprint()
        margin = cfg.min_separation
        if fp[:, 0].min() < margin or fp[:, 1].min() < margin or fp[:, 0].max() > lx - margin \
                or fp[:, 1].max() > lz - margin:
            continue
        if any(convex_polygon_distance(fp, other.footprint()) < cfg.min_separation
               for _, _, other in placed):
            continue
        trial_grid = free & (_cells_footprint_distance(bounds, free.shape, cell, fp, cfg.agent_radius)
                             >= cfg.agent_radius)
        if largest_component(trial_grid).sum() < 0.3 * trial_grid.size:
            continue
        free = trial_grid
        placed.append((cname, attrs, box))
        used.add((cname, attrs))

    objects = []
    for i, (cname, attrs, box) in enumerate(placed):
        landmark = None
        best = cfg.landmark_radius
        for j, (_, _, other) in enumerate(placed):
            if i == j:
                continue
            dist = math.hypot(box.center[0] - other.center[0], box.center[2] - other.center[2])
            if dist < best:
                best, landmark = dist, j + 1
        objects.append(SceneObject(i + 1, cname, attrs, box, landmark))

    metadata = {}
    if len(placed) < n_target:
        metadata["placement_shortfall"] = n_target - len(placed)
    grid = compute_nav_grid(bounds, cell, cfg.agent_radius, [o.box for o in objects])
    return Scene(bounds, tuple(objects), grid, cell, int(seed), cfg.agent_radius,
                 cfg.wall_height, metadata)


# ------------------------------------------------------------ path search


def shortest_path(scene: Scene, start: tuple[int, int], goal: tuple[int, int]) -> Optional[list]:
    """4-connected A* with unit edge cost; None when the goal is unreachable."""
    return astar_grid(scene.nav_grid, start, goal)


def astar_grid(grid: np.ndarray, start, goal) -> Optional[list]:
    start, goal = tuple(start), tuple(goal)
    nx, nz = grid.shape

    def free(c):
        return 0 <= c[0] < nx and 0 <= c[1] < nz and grid[c]

    if not free(start) or not free(goal):
        return None

    def h(c):
        return abs(c[0] - goal[0]) + abs(c[1] - goal[1])

    open_heap = [(h(start), 0, start)]
    came: dict = {start: None}
    g = {start: 0}
    while open_heap:
        _, gc, cur = heapq.heappop(open_heap)
        if cur == goal:
            path = []
            while cur is not None:
                path.append(cur)
                cur = came[cur]
            return path[::-1]
        if gc > g[cur]:
            continue
        x, z = cur
        for nb in ((x + 1, z), (x - 1, z), (x, z + 1), (x, z - 1)):
            if not free(nb):
                continue
            ng = gc + 1
            if ng < g.get(nb, 1 << 60):
                g[nb] = ng
                came[nb] = cur
                heapq.heappush(open_heap, (ng + h(nb), ng, nb))
    return None


def bfs_distances(grid: np.ndarray, start) -> np.ndarray:
    """Unit-cost 4-connected distances from ``start``; -1 where unreachable."""
    from collections import deque

    dist = np.full(grid.shape, -1, dtype=int)
    start = tuple(start)
    if not grid[start]:
        return dist
    dist[start] = 0
    q = deque([start])
    nx, nz = grid.shape
    while q:
        x, z = q.popleft()
        for nb in ((x + 1, z), (x - 1, z), (x, z + 1), (x, z - 1)):
            if 0 <= nb[0] < nx and 0 <= nb[1] < nz and grid[nb] and dist[nb] < 0:
                dist[nb] = dist[x, z] + 1
                q.append(nb)
    return dist


# ------------------------------------------------------------ instructions


@dataclass(frozen=True)
class Instruction:
    text: str
    task_type_gt: TaskType
    description_gt: str
    target_id: int


def describe(scene: Scene, target_id: int, with_landmark: bool = True) -> str:
    obj = scene.object_by_id(target_id)
    phrase = obj.phrase
    if with_landmark and obj.nearest_landmark_id is not None:
        phrase += LANDMARK_JOINER + scene.object_by_id(obj.nearest_landmark_id).class_name
    return phrase


def render_instruction(task_type: TaskType, description: str) -> str:
    return f"{TASK_VERBS[TaskType(task_type)]} the {description}"


def synthesize_instruction(scene: Scene, target_id: int, task_type, seed: int = 0) -> Instruction:
    """Template instruction; ``seed`` decides whether the landmark relation is spelled out."""
    try:
        task = TaskType(task_type)
    except ValueError:
        raise ValueError(f"unknown task type {task_type!r}") from None
    scene.object_by_id(target_id)
    with_landmark = bool(np.random.default_rng(seed).random() < 0.5)
    desc = describe(scene, target_id, with_landmark)
    return Instruction(render_instruction(task, desc), task, desc, target_id)


def resolve_description(scene: Scene, description: str) -> Optional[int]:
    """Object id named by an attribute/class phrase, or None unless exactly one matches."""
    head, _, landmark = description.strip().partition(LANDMARK_JOINER)
    tokens = head.split()
    if not tokens:
        return None
    cname, attrs = tokens[-1], tuple(tokens[:-1])
    hits = [o for o in scene.objects if o.class_name == cname and set(o.attributes) == set(attrs)
            and len(o.attributes) == len(attrs)]
    if landmark and len(hits) > 1:
        hits = [o for o in hits if o.nearest_landmark_id is not None
                and scene.object_by_id(o.nearest_landmark_id).class_name == landmark.strip()]
    return hits[0].id if len(hits) == 1 else None


# ------------------------------------------------------------ file I/O


def scene_to_dict(scene: Scene) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "seed": scene.seed,
        "bounds": list(scene.bounds),
        "wall_height": scene.wall_height,
        "grid": {
            "cell_size": scene.cell_size,
            "agent_radius": scene.agent_radius,
            "shape": list(scene.nav_grid.shape),
            "rows": ["".join("1" if v else "0" for v in row) for row in scene.nav_grid],
        },
        "metadata": scene.metadata,
        "objects": [
            {
                "id": o.id,
                "class": o.class_name,
                "attributes": list(o.attributes),
                "center": list(o.box.center),
                "half_extents": list(o.box.half_extents),
                "yaw": o.box.yaw,
                "nearest_landmark_id": o.nearest_landmark_id,
            }
            for o in scene.objects
        ],
    }


def dumps_scene(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), indent=1, sort_keys=True) + "\n"


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(dumps_scene(scene), encoding="utf-8")


def scene_from_dict(doc: dict) -> Scene:
    try:
        version = doc["format_version"]
        if version != FORMAT_VERSION:
            raise SceneFormatError(f"unsupported format_version {version!r}")
        grid_doc = doc["grid"]
        rows = grid_doc["rows"]
        grid = np.array([[c == "1" for c in r] for r in rows], dtype=bool)
        if list(grid.shape) != list(grid_doc["shape"]):
            raise SceneFormatError(f"grid rows do not match declared shape {grid_doc['shape']}")
        seen: set[int] = set()
        objects = []
        for rec in doc["objects"]:
            oid = int(rec["id"])
            if oid in seen:
                raise SceneFormatError(f"duplicate object id {oid}")
            seen.add(oid)
            box = OrientedBox3D(tuple(rec["center"]), tuple(rec["half_extents"]), rec["yaw"])
            objects.append(SceneObject(oid, rec["class"], tuple(rec["attributes"]), box,
                                       rec.get("nearest_landmark_id")))
        for o in objects:
            if o.nearest_landmark_id is not None and o.nearest_landmark_id not in seen:
                raise SceneFormatError(f"object {o.id} names unknown landmark {o.nearest_landmark_id}")
        return Scene(tuple(float(v) for v in doc["bounds"]), tuple(objects), grid,
                     float(grid_doc["cell_size"]), int(doc["seed"]), float(grid_doc["agent_radius"]),
                     float(doc["wall_height"]), dict(doc.get("metadata", {})))
    except SceneFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneFormatError(f"invalid scene record: {exc!r}") from exc


def loads_scene(text: str) -> Scene:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        context = lines[exc.lineno - 1] if 0 < exc.lineno <= len(lines) else ""
        raise SceneFormatError(
            f"parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}; near {context.strip()!r}"
        ) from exc
    if not isinstance(doc, dict):
        raise SceneFormatError("scene document must be an object")
    return scene_from_dict(doc)


def load_scene(path) -> Scene:
    return loads_scene(Path(path).read_text(encoding="utf-8"))


def footprints_overlap(a: OrientedBox3D, b: OrientedBox3D) -> bool:
    inter = clip_convex(a.footprint(), b.footprint())
    return len(inter) >= 3 and abs(polygon_signed_area(inter)) > 1e-12
