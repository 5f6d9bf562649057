"""
Synthetic furniture corpus.

Provides:
- Procedural chair / table / cabinet generators (axis-aligned parts that meet
  corner-to-corner, mirror-symmetric about the yz-plane)
- Planted targets: a source deformed by a random feasible offset plus noise
- rf-1 JSON database and target files
"""

import json
import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import CorpusConfig, check_dim_ranges, check_part_count
from .errors import DatabaseFormatError, DataError, EmptyDatabase, SchemaVersionError, UsageError
from .geometry import Aabb, PointCloud, reflect_yz, sample_surface, save_ply
from .partmodel import (
    DEFAULT_TAU,
    Contact,
    Part,
    SourceShape,
    apply_deformation,
    constraint_system,
    extract_contacts,
    unflatten_params,
)

logger = logging.getLogger(__name__)

SCHEMA = "rf-1"
MIN_DIM_RATIO = 0.5  # planted dims never shrink below half the default

# (box, index of the part it mirrors or None)
Layout = list[tuple[Aabb, int | None]]


# =============================================================================
# Families
# =============================================================================


# "family.role" -> (low, high) before normalisation; GenSpec.dims overrides these
DEFAULT_DIMS: dict[str, tuple[float, float]] = {
    "chair.width": (0.8, 1.2),
    "chair.depth": (0.8, 1.2),
    "chair.seat": (0.08, 0.15),
    "chair.height": (0.6, 1.0),
    "chair.back_height": (0.6, 1.2),
    "chair.back": (0.06, 0.12),
    "chair.leg": (0.06, 0.12),
    "chair.arm": (0.06, 0.1),
    "chair.arm_height": (0.2, 0.35),
    "chair.stretcher": (0.04, 0.08),
    "table.width": (1.0, 2.0),
    "table.depth": (0.6, 1.2),
    "table.top": (0.05, 0.12),
    "table.height": (0.6, 1.0),
    "table.leg": (0.06, 0.12),
    "table.shelf": (0.03, 0.06),
    "cabinet.width": (0.8, 1.6),
    "cabinet.height": (0.8, 1.8),
    "cabinet.depth": (0.4, 0.8),
    "cabinet.door": (0.02, 0.05),
    "cabinet.top": (0.03, 0.08),
    "cabinet.leg": (0.06, 0.12),
    "cabinet.foot": (0.05, 0.2),
}

# part counts each family's builder can produce
PART_COUNTS: dict[str, frozenset[int]] = {
    "chair": frozenset(range(4, 9)),
    "table": frozenset(range(3, 7)),
    "cabinet": frozenset({2, 3, 4, 6, 7, 8}),
}

MAX_LAYOUT_ATTEMPTS = 256

Draw = Callable[[str], float]
Builder = Callable[[np.random.Generator, Draw], Layout]

_FAMILIES: dict[str, Builder] = {}


def family(name: str):
    """Register a layout builder for a shape family."""

    def decorator(func: Builder):
        _FAMILIES[name] = func
        return func

    return decorator


def get_families() -> list[str]:
    return list(_FAMILIES)


def dim_sampler(fam: str, rng: np.random.Generator, overrides: dict[str, tuple[float, float]] | None = None) -> Draw:
    """draw(role) -> uniform sample from the role's range, overrides first."""
    overrides = overrides or {}

    def draw(role: str) -> float:
        key = f"{fam}.{role}"
        low, high = overrides.get(key, DEFAULT_DIMS[key])
        return float(rng.uniform(low, high))

    return draw


def _box(lo, hi) -> Aabb:
    return Aabb.from_bounds(lo, hi)


def _mirror(layout: Layout, box: Aabb):
    """Append box and its yz-mirror image."""
    layout.append((box, None))
    layout.append((Aabb(box.center * np.array([-1.0, 1.0, 1.0]), box.dims), len(layout) - 1))


def _legs(layout: Layout, leg: float, w: float, d: float, top_y: float, height: float, panel: bool):
    """Four corner legs or two side panels of thickness `leg` under a board."""
    bottom = top_y - height
    if panel:
        _mirror(layout, _box((w / 2 - leg, bottom, -d / 2), (w / 2, top_y, d / 2)))
    else:
        _mirror(layout, _box((w / 2 - leg, bottom, d / 2 - leg), (w / 2, top_y, d / 2)))
        _mirror(layout, _box((w / 2 - leg, bottom, -d / 2), (w / 2, top_y, -d / 2 + leg)))


@family("chair")
def chair(rng: np.random.Generator, draw: Draw) -> Layout:
    """Seat, back, 2 panel or 4 corner legs, optional arms, optional stretcher (4-8 parts)."""
    w, d = draw("width"), draw("depth")
    t = draw("seat")
    h = draw("height")
    panel = rng.random() < 0.3
    arms = rng.random() < 0.4
    stretcher = rng.random() < 0.4 and (panel or not arms)

    layout: Layout = [(_box((-w / 2, 0.0, -d / 2), (w / 2, t, d / 2)), None)]
    back_h, back_t = draw("back_height"), draw("back")
    layout.append((_box((-w / 2, t, -d / 2), (w / 2, t + back_h, -d / 2 + back_t)), None))
    leg = draw("leg")
    _legs(layout, leg, w, d, 0.0, h, panel)

    if arms:
        a, ah = draw("arm"), draw("arm_height")
        depth = d * rng.uniform(0.6, 1.0)
        _mirror(layout, _box((w / 2, t, -d / 2), (w / 2 + a, t + ah, -d / 2 + depth)))
    if stretcher:
        s = draw("stretcher")
        mid = -h / 2
        if panel:
            layout.append((_box((-(w / 2 - leg), mid - s / 2, -s / 2), (w / 2 - leg, mid + s / 2, s / 2)), None))
        else:
            layout.append((_box((-(w / 2 - leg), mid - s / 2, d / 2 - leg), (w / 2 - leg, mid + s / 2, d / 2)), None))
    return layout


@family("table")
def table(rng: np.random.Generator, draw: Draw) -> Layout:
    """Top, 2 panel or 4 corner legs, optional lower shelf or stretcher (3-6 parts)."""
    w = draw("width")
    d = draw("depth")
    t = draw("top")
    h = draw("height")
    panel = rng.random() < 0.3

    layout: Layout = [(_box((-w / 2, 0.0, -d / 2), (w / 2, t, d / 2)), None)]
    leg = draw("leg")
    _legs(layout, leg, w, d, 0.0, h, panel)
    if rng.random() < 0.5:
        s = draw("shelf")
        mid = -h / 2
        depth = d / 2 if panel else d / 2 - leg
        layout.append((_box((-(w / 2 - leg), mid - s / 2, -depth), (w / 2 - leg, mid + s / 2, depth)), None))
    return layout


@family("cabinet")
def cabinet(rng: np.random.Generator, draw: Draw) -> Layout:
    """Body, one or two doors, optional top board, optional four feet (2-8 parts)."""
    w = draw("width")
    h = draw("height")
    d = draw("depth")
    door = draw("door")

    layout: Layout = [(_box((-w / 2, 0.0, -d / 2), (w / 2, h, d / 2)), None)]
    if rng.random() < 0.5:
        layout.append((_box((-w / 2, 0.0, d / 2), (w / 2, h, d / 2 + door)), None))
    else:
        _mirror(layout, _box((0.0, 0.0, d / 2), (w / 2, h, d / 2 + door)))
    if rng.random() < 0.5:
        top = draw("top")
        layout.append((_box((-w / 2, h, -d / 2), (w / 2, h + top, d / 2)), None))
    if rng.random() < 0.5:
        _legs(layout, draw("leg"), w, d, 0.0, draw("foot"), panel=False)
    return layout


# =============================================================================
# Generation
# =============================================================================


@dataclass
class GenSpec:
    """
    Which families to cycle through, how densely to sample, and the base seed.

    part_count restricts shapes to an inclusive (min, max) number of parts;
    families that can never land in that range are skipped. dims overrides
    the per-role dimension ranges in DEFAULT_DIMS.
    """

    families: tuple[str, ...] = ("chair", "table", "cabinet")
    n_points: int = 2048
    tau: float = DEFAULT_TAU
    seed: int = 0
    part_count: tuple[int, ...] = ()
    dims: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        self.families = tuple(self.families)
        unknown = [f for f in self.families if f not in _FAMILIES]
        if not self.families or unknown:
            raise UsageError(f"unknown shape families {unknown} (known: {get_families()})")
        if self.n_points < 2 or self.n_points % 2:
            raise UsageError("n_points must be an even number >= 2")
        self.part_count = check_part_count(self.part_count)
        self.dims = check_dim_ranges(self.dims)
        unknown = sorted(set(self.dims) - set(DEFAULT_DIMS))
        if unknown:
            raise UsageError(f"unknown dimension roles {unknown} (known: {sorted(DEFAULT_DIMS)})")
        if not self.active_families:
            raise UsageError(
                f"no family in {list(self.families)} can have {self.part_count[0]}-{self.part_count[1]} parts"
            )

    @property
    def active_families(self) -> tuple[str, ...]:
        """The configured families that can produce an allowed part count."""
        if not self.part_count:
            return self.families
        allowed = set(range(self.part_count[0], self.part_count[1] + 1))
        return tuple(f for f in self.families if PART_COUNTS.get(f, allowed) & allowed)

    def accepts(self, n_parts: int) -> bool:
        return not self.part_count or self.part_count[0] <= n_parts <= self.part_count[1]

    @classmethod
    def from_config(cls, cfg: CorpusConfig) -> "GenSpec":
        return cls(cfg.families, cfg.n_points, cfg.tau, cfg.seed, cfg.part_count, cfg.dims)


def _normalise(layout: Layout) -> Layout:
    """Centre in y and z, scale uniformly into [-1, 1]; x stays mirror-exact."""
    bounds = Aabb.from_points(np.concatenate([[b.lo, b.hi] for b, _ in layout]))
    lo, hi = bounds.lo, bounds.hi
    shift = (lo + hi) / 2.0
    shift[0] = 0.0
    scale = 1.0 / np.max(np.maximum(np.abs(lo - shift), np.abs(hi - shift)))
    out: Layout = []
    for box, mirror in layout:
        if mirror is None:
            out.append((Aabb((box.center - shift) * scale, box.dims * scale), None))
        else:
            partner = out[mirror][0]
            out.append((Aabb(partner.center * np.array([-1.0, 1.0, 1.0]), partner.dims), mirror))
    return out


def _allocate(layout: Layout, n_points: int) -> list[int]:
    """Half-counts per symmetry unit, proportional to area, at least 1 each."""
    units = [i for i, (_, mirror) in enumerate(layout) if mirror is None]
    half = n_points // 2
    if half < len(units):
        raise UsageError(f"{n_points} points cannot cover {len(units)} symmetry units")

    def area(box: Aabb) -> float:
        x, y, z = box.dims
        return 2.0 * (x * y + y * z + x * z)

    weights = np.array([area(layout[i][0]) * (2 if any(m == i for _, m in layout) else 1) for i in units])
    counts = np.ones(len(units), dtype=int)
    share = weights / weights.sum() * (half - len(units))
    counts += np.floor(share).astype(int)
    remainder = half - counts.sum()
    order = np.argsort(-(share - np.floor(share)), kind="stable")
    counts[order[:remainder]] += 1
    return [int(c) for c in counts]


def _build_shape(name: str, layout: Layout, n_points: int, tau: float, rng: np.random.Generator) -> SourceShape:
    layout = _normalise(layout)
    units = [i for i, (_, mirror) in enumerate(layout) if mirror is None]
    halves = dict(zip(units, _allocate(layout, n_points), strict=True))

    points: dict[int, np.ndarray] = {}
    for i in units:
        box = layout[i][0]
        sample = sample_surface(box, halves[i], seed=rng).points
        if any(m == i for _, m in layout):
            points[i] = sample
        else:
            points[i] = np.concatenate([sample, reflect_yz(sample)])
    for i, (_, mirror) in enumerate(layout):
        if mirror is not None:
            points[i] = reflect_yz(points[mirror])

    parts = [Part(i, box, points[i]) for i, (box, _) in enumerate(layout)]
    shape = SourceShape(name, parts)
    if tau != DEFAULT_TAU:
        shape.constraint = extract_contacts(shape, tau)
    return shape


def generate_shape(spec: GenSpec, index: int) -> SourceShape:
    """
    Shape number `index` of the corpus; depends only on (spec, index).

    Layouts outside spec.part_count are redrawn from the same generator.

    Raises:
        UsageError: if no allowed layout turns up in MAX_LAYOUT_ATTEMPTS draws
    """
    rng = np.random.default_rng([spec.seed, index])
    families = spec.active_families
    fam = families[index % len(families)]
    draw = dim_sampler(fam, rng, spec.dims)
    for _ in range(MAX_LAYOUT_ATTEMPTS):
        layout = _FAMILIES[fam](rng, draw)
        if spec.accepts(len(layout)):
            return _build_shape(f"{fam}_{index:04d}", layout, spec.n_points, spec.tau, rng)
    raise UsageError(f"no {fam} layout with {spec.part_count[0]}-{spec.part_count[1]} parts "
                     f"in {MAX_LAYOUT_ATTEMPTS} draws")


def generate_database(spec: GenSpec, n_sources: int, threads: int = 1) -> list[SourceShape]:
    """n_sources shapes cycling through the configured families, deterministic per seed."""
    if n_sources < 1:
        raise UsageError("n_sources must be >= 1")
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        db = list(pool.map(lambda i: generate_shape(spec, i), range(n_sources)))
    logger.info("generated %d sources (%s)", len(db), ", ".join(spec.active_families))
    return db


# =============================================================================
# Targets
# =============================================================================


@dataclass
class TargetRecord:
    """A target cloud and, for planted targets, how it was made."""

    cloud: PointCloud
    source: int | None = None  # generating source id; None for external clouds
    offset: np.ndarray | None = None
    noise: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def external(self) -> bool:
        return self.source is None

    def to_json(self) -> dict:
        provenance = (
            "external"
            if self.external
            else {"source": self.source, "offset": self.offset.tolist(), "noise": self.noise}
        )
        return {"points": self.cloud.to_json(), "provenance": provenance}


def planted_offset(shape: SourceShape, rng: np.random.Generator, offset_scale: float,
                   alpha: float = 0.1) -> np.ndarray:
    """A random feasible offset with max |entry| = offset_scale, dims kept >= half the default."""
    offset = shape.constraint.projector @ rng.normal(size=shape.n_params)
    peak = np.abs(offset).max()
    if offset_scale == 0 or peak == 0:
        return np.zeros(shape.n_params)
    offset *= offset_scale / peak

    _, dims = unflatten_params(shape.default_params)
    _, delta = unflatten_params(alpha * offset)
    shrink = delta < 0
    if shrink.any():
        limit = np.min((1.0 - MIN_DIM_RATIO) * dims[shrink] / -delta[shrink])
        offset *= min(1.0, limit)
    return offset


def generate_targets(db: Sequence[SourceShape], n_targets: int, offset_scale: float = 1.0,
                     noise_sigma: float = 0.01, seed: int = 0, alpha: float = 0.1) -> list[TargetRecord]:
    """Each target: a random source's samples under a random feasible offset, plus Gaussian noise."""
    if not db:
        raise EmptyDatabase("cannot plant targets without sources")
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n_targets):
        s = int(rng.integers(len(db)))
        offset = planted_offset(db[s], rng, offset_scale, alpha)
        points = apply_deformation(db[s], offset, alpha).points
        if noise_sigma > 0:
            points = points + rng.normal(0.0, noise_sigma, size=points.shape)
        records.append(TargetRecord(PointCloud(points), s, offset, noise_sigma))
    return records


def split_targets(records: Sequence, train_fraction: float = 0.8, seed: int = 0) -> tuple[list, list]:
    """Shuffled train/test split; the train share is rounded to the nearest count."""
    order = np.random.default_rng(seed).permutation(len(records))
    cut = int(round(train_fraction * len(records)))
    return [records[i] for i in order[:cut]], [records[i] for i in order[cut:]]


# =============================================================================
# Files
# =============================================================================


def shape_to_json(shape: SourceShape) -> dict:
    return {
        "name": shape.name,
        "parts": [{"box": p.box.to_json(), "points": p.points.tolist()} for p in shape.parts],
        "contacts": [{"parts": [c.part_i, c.part_j], "point": list(c.point)} for c in shape.constraint.contacts],
    }


def save_database(db: Sequence[SourceShape], path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = {"schema": SCHEMA, "shapes": [shape_to_json(s) for s in db]}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f)
    logger.info("wrote %d sources to %s", len(db), path)


def _read_document(path: Path, key: str) -> list:
    if not path.exists():
        raise DataError(f"file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise EmptyDatabase(f"{path}: file is empty")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise DatabaseFormatError(str(path), "$", f"invalid JSON ({e})") from e
    if not isinstance(data, dict):
        raise DatabaseFormatError(str(path), "$", "expected an object")
    schema = data.get("schema")
    if schema != SCHEMA:
        raise SchemaVersionError(f"{path}: schema {schema!r}, expected {SCHEMA!r}")
    items = data.get(key)
    if not isinstance(items, list):
        raise DatabaseFormatError(str(path), f"$.{key}", "missing or not a list")
    return items


def _parse_shape(path: Path, where: str, item, tau: float) -> SourceShape:
    if not isinstance(item, dict):
        raise DatabaseFormatError(str(path), where, "expected an object")
    if "parts" not in item:
        raise DatabaseFormatError(str(path), where, "missing 'parts'")
    try:
        parts = [
            Part(i, Aabb.from_json(p["box"]), np.asarray(p["points"], dtype=np.float64))
            for i, p in enumerate(item["parts"])
        ]
        name = str(item.get("name", where))
        if "contacts" in item:
            contacts = [Contact(int(c["parts"][0]), int(c["parts"][1]), tuple(float(v) for v in c["point"]))
                        for c in item["contacts"]]
            return SourceShape(name, parts, constraint_system([p.box for p in parts], contacts))
        shape = SourceShape(name, parts)
        if tau != DEFAULT_TAU:
            shape.constraint = extract_contacts(shape, tau)
        return shape
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise DatabaseFormatError(str(path), where, str(e)) from e


def load_database(path: str | Path, tau: float = DEFAULT_TAU) -> list[SourceShape]:
    """
    Read an rf-1 database.

    Raises:
        EmptyDatabase: if the file or its shape list is empty
        SchemaVersionError: on a missing or different schema tag
        DatabaseFormatError: naming the file and JSON path of the first bad entry
    """
    path = Path(path)
    items = _read_document(path, "shapes")
    if not items:
        raise EmptyDatabase(f"{path}: database has no shapes")
    db = [_parse_shape(path, f"$.shapes[{i}]", item, tau) for i, item in enumerate(items)]
    names = [s.name for s in db]
    if len(set(names)) != len(names):
        raise DatabaseFormatError(str(path), "$.shapes", "duplicate shape names")
    return db


def save_targets(records: Sequence[TargetRecord], path: str | Path, ply_dir: str | Path | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"schema": SCHEMA, "targets": [r.to_json() for r in records]}, f)
    if ply_dir is not None:
        for i, r in enumerate(records):
            save_ply(r.cloud, Path(ply_dir) / f"target_{i:05d}.ply")


def load_targets(path: str | Path) -> list[TargetRecord]:
    path = Path(path)
    items = _read_document(path, "targets")
    records = []
    for i, item in enumerate(items):
        where = f"$.targets[{i}]"
        try:
            cloud = PointCloud.from_json(item["points"])
            provenance = item.get("provenance", "external")
            if provenance == "external":
                records.append(TargetRecord(cloud))
            else:
                records.append(
                    TargetRecord(cloud, int(provenance["source"]),
                                 np.asarray(provenance["offset"], dtype=np.float64),
                                 float(provenance.get("noise", 0.0)))
                )
        except (KeyError, TypeError, ValueError) as e:
            raise DatabaseFormatError(str(path), where, str(e)) from e
    return records
