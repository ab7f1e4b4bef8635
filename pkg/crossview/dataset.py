"""
Synthetic Cross-View Dataset
============================

A flat world of colored disk landmarks stands in for a city. Every sample
owns one aerial tile (top-down render) and one street panorama taken from a
query location inside it. Optional modes mirror the harder benchmark
settings: queries offset from the tile center (with overlapping neighbor
tiles), unknown orientation (random horizontal roll) and limited field of
view.

World coordinates are meters, x east and y north, with the origin at the
south-west corner. They map onto lat/lon with a flat mapping around (0, 0)
whose meters agree with geo.covers() and geo.geodesic_m().
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd

from .errors import FormatError
from .geo import AerialTile, GeoLocation, covers, local_offset_m, offset_to_geo

logger = logging.getLogger("Dataset")

INDEX_FILE = "index.csv"
META_FILE = "dataset.json"
INDEX_COLUMNS = ["id", "street", "aerial", "lat", "lon", "center_lat", "center_lon",
                 "extent_m", "off_x_m", "off_y_m", "split", "neighbors"]

GROUND_COLOR = (96, 112, 80)
SKY_COLOR = (150, 190, 230)
OFFSET_SLACK_M = 1e-6

Color = Tuple[int, int, int]
Box = Tuple[float, float, float, float]  # x0, y0, x1, y1 in world meters


# ============================================================================
# WORLD
# ============================================================================

@dataclass(frozen=True)
class SceneSpec:
    """Everything the world generator needs; generation is a function of this"""
    seed: int = 0
    world_side_m: float = 1600.0
    landmarks: int = 600
    radius_range_m: Tuple[float, float] = (3.0, 12.0)
    palette_size: int = 8

    def __post_init__(self):
        errors = []
        if self.landmarks < 1:
            errors.append(f"landmark count must be >= 1, got {self.landmarks}")
        if self.world_side_m <= 0:
            errors.append("world side must be positive")
        lo, hi = self.radius_range_m
        if not 0 < lo <= hi:
            errors.append(f"radius range must satisfy 0 < min <= max, got {self.radius_range_m}")
        if self.palette_size < 1:
            errors.append("palette needs at least one color")
        if errors:
            raise ValueError("Scene errors:\n" + "\n".join(f"- {e}" for e in errors))


@dataclass(frozen=True)
class Landmark:
    x_m: float
    y_m: float
    radius_m: float
    color: Color


@dataclass
class World:
    side_m: float
    landmarks: List[Landmark]

    def in_box(self, box: Box) -> List[Landmark]:
        """Landmarks whose centers lie inside box, boundary included"""
        x0, y0, x1, y1 = box
        return [lm for lm in self.landmarks if x0 <= lm.x_m <= x1 and y0 <= lm.y_m <= y1]

    def to_geo(self, x_m: float, y_m: float) -> GeoLocation:
        half = self.side_m / 2.0
        return offset_to_geo(x_m - half, y_m - half)

    def to_world(self, loc: GeoLocation) -> Tuple[float, float]:
        east, north = local_offset_m(loc, GeoLocation(0.0, 0.0))
        half = self.side_m / 2.0
        return east + half, north + half


def generate_world(spec: SceneSpec) -> World:
    """K disk landmarks, uniform positions, seeded palette"""
    rng = np.random.default_rng(spec.seed)
    palette = rng.integers(0, 256, size=(spec.palette_size, 3))
    xy = rng.uniform(0.0, spec.world_side_m, size=(spec.landmarks, 2))
    radii = rng.uniform(*spec.radius_range_m, size=spec.landmarks)
    picks = rng.integers(0, spec.palette_size, size=spec.landmarks)
    landmarks = [
        Landmark(float(x), float(y), float(r), tuple(int(c) for c in palette[p]))
        for (x, y), r, p in zip(xy, radii, picks)
    ]
    return World(side_m=spec.world_side_m, landmarks=landmarks)


# ============================================================================
# RENDERING
# ============================================================================

def tile_box(center_xy: Tuple[float, float], extent_m: float) -> Box:
    cx, cy = center_xy
    half = extent_m / 2.0
    return cx - half, cy - half, cx + half, cy + half


def render_aerial(world: World, tile: AerialTile) -> np.ndarray:
    """
    Orthographic top-down render of the square tile, north up. Only
    landmarks centered inside the tile are drawn (clipped at the edges).
    """
    center_xy = world.to_world(tile.center)
    extent_m, side_px = tile.ground_extent_m, tile.side_px
    cx, cy = center_xy
    img = np.empty((side_px, side_px, 3), dtype=np.uint8)
    img[:] = GROUND_COLOR
    scale = extent_m / side_px
    centers = (np.arange(side_px) + 0.5) * scale
    xs = (cx - extent_m / 2.0) + centers
    ys = (cy + extent_m / 2.0) - centers
    for lm in world.in_box(tile_box(center_xy, extent_m)):
        inside = (xs[None, :] - lm.x_m) ** 2 + (ys[:, None] - lm.y_m) ** 2 <= lm.radius_m ** 2
        img[inside] = lm.color
    return img


def _wrap_deg(delta: np.ndarray) -> np.ndarray:
    return (delta + 180.0) % 360.0 - 180.0


def render_panorama(world: World, loc: GeoLocation, h: int, w: int,
                    heading_offset: float = 0.0, fov_deg: float = 360.0,
                    view_box: Optional[Box] = None) -> np.ndarray:
    """
    Cylindrical street view from loc. Column j looks at azimuth
    heading_offset + fov * j / w (degrees clockwise from north). Each visible
    landmark is a vertical bar centered on the horizon whose angular width
    and height shrink with distance; per column the nearest landmark wins.
    view_box limits which landmarks are visible (default: the whole world).
    """
    if not 0.0 < fov_deg <= 360.0:
        raise ValueError(f"fov must be in (0, 360], got {fov_deg}")
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[: h // 2] = SKY_COLOR
    img[h // 2:] = GROUND_COLOR
    visible = world.landmarks if view_box is None else world.in_box(view_box)
    if not visible:
        return img

    qx, qy = world.to_world(loc)
    col_az = heading_offset + fov_deg * np.arange(w) / w
    min_half_width = 0.5 * fov_deg / w
    depth = np.full(w, np.inf)
    owner = np.full(w, -1, dtype=np.int64)
    for k, lm in enumerate(visible):
        dx, dy = lm.x_m - qx, lm.y_m - qy
        dist = math.hypot(dx, dy)
        azimuth = math.degrees(math.atan2(dx, dy))
        half_width = max(math.degrees(math.atan2(lm.radius_m, dist)), min_half_width)
        hit = (np.abs(_wrap_deg(col_az - azimuth)) <= half_width) & (dist < depth)
        depth[hit] = dist
        owner[hit] = k

    horizon = h / 2.0
    for j in np.nonzero(owner >= 0)[0]:
        lm = visible[owner[j]]
        half_height = max(1.0, horizon * min(1.0, 2.0 * lm.radius_m / max(depth[j], 1e-9)))
        top = max(0, int(round(horizon - half_height)))
        bottom = min(h, int(round(horizon + half_height)))
        img[top:bottom, j] = lm.color
    return img


# ============================================================================
# PPM / PGM
# ============================================================================

def save_ppm(image: np.ndarray, path: Union[str, Path]):
    """Binary P6 for H x W x 3, P5 for H x W (8-bit, maxval 255)"""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError(f"PPM images must be uint8, got {image.dtype}")
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write image of shape {image.shape} as PPM/PGM")
    h, w = image.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image).tobytes())


def load_ppm(path: Union[str, Path]) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a binary PPM/PGM (magic {magic!r})")

    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            end = raw.find(b"\n", pos)
            if end < 0:
                raise FormatError(f"{path}: header comment runs past end of file")
            pos = end + 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: malformed header")
        fields.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FormatError(f"{path}: header must end with one whitespace byte")
    pos += 1

    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    expected = w * h * channels
    payload = raw[pos:]
    if len(payload) < expected:
        raise FormatError(f"{path}: header declares {expected} bytes, only {len(payload)} present")
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} trailing bytes after pixel data")
    pixels = np.frombuffer(payload, dtype=np.uint8)
    return pixels.reshape(h, w, 3).copy() if channels == 3 else pixels.reshape(h, w).copy()


def to_model_input(image: np.ndarray) -> np.ndarray:
    """uint8 -> float32 centered on zero"""
    return image.astype(np.float32) / 255.0 - 0.5


# ============================================================================
# INDEX
# ============================================================================

@dataclass(frozen=True)
class DatasetModes:
    offset: bool = False
    unknown_orientation: bool = False
    fov_deg: float = 360.0
    street_height: int = 64
    street_width: int = 256
    aerial_size: int = 128
    test_fraction: float = 0.0
    split_mode: str = "random"

    def __post_init__(self):
        errors = []
        if not 0.0 < self.fov_deg <= 360.0:
            errors.append(f"fov_deg must be in (0, 360], got {self.fov_deg}")
        if min(self.street_height, self.street_width, self.aerial_size) < 1:
            errors.append("image sizes must be positive")
        if not 0.0 <= self.test_fraction < 1.0:
            errors.append(f"test_fraction must be in [0, 1), got {self.test_fraction}")
        if self.split_mode not in ("random", "cross_area"):
            errors.append(f"split_mode must be random or cross_area, got {self.split_mode}")
        if errors:
            raise ValueError("Dataset mode errors:\n" + "\n".join(f"- {e}" for e in errors))


@dataclass(frozen=True)
class SampleRecord:
    """One query and its own aerial tile; paths are relative to the index"""
    id: str
    street: str
    aerial: str
    location: GeoLocation
    tile: AerialTile
    offset_m: Tuple[float, float]
    split: str
    neighbors: Tuple[str, ...] = ()


@dataclass
class DatasetIndex:
    records: List[SampleRecord]
    modes: DatasetModes
    root: Path = field(default_factory=Path)
    _by_id: Dict[str, SampleRecord] = field(default_factory=dict, init=False, repr=False)
    _closure: Dict[str, Set[str]] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self._by_id = {r.id: r for r in self.records}
        if len(self._by_id) != len(self.records):
            raise ValueError("sample ids must be unique")
        closure = {r.id: set() for r in self.records}
        for r in self.records:
            for n in r.neighbors:
                if n not in closure:
                    raise ValueError(f"{r.id} lists unknown neighbor {n}")
                if n == r.id:
                    raise ValueError(f"{r.id} lists itself as a neighbor")
                closure[r.id].add(n)
                closure[n].add(r.id)
        self._closure = closure

    def __len__(self) -> int:
        return len(self.records)

    def by_id(self, sample_id: str) -> SampleRecord:
        return self._by_id[sample_id]

    def neighbors_of(self, sample_id: str) -> Set[str]:
        """Symmetric neighbor relation"""
        return set(self._closure[sample_id])

    def footprint(self, sample_id: str) -> Set[str]:
        """Own tile plus every tile related to it by the neighbor relation"""
        return {sample_id} | self._closure[sample_id]

    def ids(self, split: Optional[str] = None) -> List[str]:
        return [r.id for r in self.records if split is None or r.split == split]

    def path(self, relative: str) -> Path:
        return self.root / relative


def _tile_layout(n: int, world_side_m: float) -> Tuple[int, float]:
    g = math.ceil(math.sqrt(n))
    return g, world_side_m / g


def emit_dataset(spec: SceneSpec, n: int, modes: DatasetModes, out_dir: Union[str, Path]) -> DatasetIndex:
    """
    Render n samples and write street/, aerial/, index.csv and dataset.json.

    Tiles sit on a g x g grid (g = ceil(sqrt n)) with spacing s. Aligned mode
    uses extent s and a centered query. Offset mode uses extent 2s and draws
    the query uniformly within s/2 of its own center, so the own tile stays
    the nearest one; every other tile covering the query is a neighbor.
    """
    if n < 1:
        raise ValueError(f"need n >= 1 samples, got {n}")
    out_dir = Path(out_dir)
    world = generate_world(spec)
    rng = np.random.default_rng([spec.seed, n])
    g, spacing = _tile_layout(n, spec.world_side_m)
    extent = 2.0 * spacing if modes.offset else spacing
    logger.info(f"🌍 World: {len(world.landmarks)} landmarks, {g}x{g} tiles of {extent:.1f} m")

    centers = [((k % g + 0.5) * spacing, (k // g + 0.5) * spacing) for k in range(n)]
    ids = [f"{k:05d}" for k in range(n)]
    tiles = [AerialTile(world.to_geo(*c), extent, modes.aerial_size) for c in centers]

    queries, offsets = [], []
    for cx, cy in centers:
        if modes.offset:
            ox, oy = rng.uniform(-spacing / 2.0, spacing / 2.0, size=2)
        else:
            ox, oy = 0.0, 0.0
        queries.append((cx + float(ox), cy + float(oy)))
        offsets.append((float(ox), float(oy)))
    locations = [world.to_geo(*q) for q in queries]

    headings = [0.0] * n
    if modes.unknown_orientation:
        shifts = rng.integers(0, modes.street_width, size=n)
        headings = [360.0 * int(s) / modes.street_width for s in shifts]

    splits = ["train"] * n
    if modes.test_fraction > 0:
        if modes.split_mode == "cross_area":
            splits = ["test" if q[0] > spec.world_side_m / 2.0 else "train" for q in queries]
        else:
            n_test = int(math.floor(modes.test_fraction * n))
            for k in rng.permutation(n)[:n_test]:
                splits[k] = "test"

    records = []
    for k in range(n):
        neighbors: Tuple[str, ...] = ()
        if modes.offset:
            # only tiles within one spacing per axis can cover the query
            row, col = divmod(k, g)
            near = [r * g + c for r in range(row - 1, row + 2) for c in range(col - 1, col + 2)
                    if 0 <= r < g and 0 <= c < g and r * g + c < n and r * g + c != k]
            neighbors = tuple(ids[j] for j in near if covers(locations[k], tiles[j]))

        box = tile_box(world.to_world(tiles[k].center), extent)
        street = render_panorama(world, locations[k], modes.street_height, modes.street_width,
                                 headings[k], modes.fov_deg, view_box=box)
        aerial = render_aerial(world, tiles[k])
        street_rel, aerial_rel = f"street/{ids[k]}.ppm", f"aerial/{ids[k]}.ppm"
        save_ppm(street, out_dir / street_rel)
        save_ppm(aerial, out_dir / aerial_rel)
        records.append(SampleRecord(
            id=ids[k], street=street_rel, aerial=aerial_rel, location=locations[k],
            tile=tiles[k], offset_m=offsets[k], split=splits[k], neighbors=neighbors,
        ))

    index = DatasetIndex(records, modes, root=out_dir)
    write_index(index, out_dir, spec)
    n_test = sum(r.split == "test" for r in records)
    logger.info(f"✅ Wrote {n} samples ({n - n_test} train / {n_test} test) to {out_dir}")
    return index


def write_index(index: DatasetIndex, out_dir: Union[str, Path], spec: Optional[SceneSpec] = None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [{
        "id": r.id, "street": r.street, "aerial": r.aerial,
        "lat": r.location.lat, "lon": r.location.lon,
        "center_lat": r.tile.center.lat, "center_lon": r.tile.center.lon,
        "extent_m": r.tile.ground_extent_m,
        "off_x_m": r.offset_m[0], "off_y_m": r.offset_m[1],
        "split": r.split, "neighbors": ";".join(r.neighbors),
    } for r in index.records]
    pd.DataFrame(rows, columns=INDEX_COLUMNS).to_csv(out_dir / INDEX_FILE, index=False)
    meta = {"modes": asdict(index.modes)}
    if spec is not None:
        meta["scene"] = asdict(spec)
    with open(out_dir / META_FILE, "w") as f:
        json.dump(meta, f, indent=2)


def load_index(path: Union[str, Path]) -> DatasetIndex:
    """Read index.csv (a file or its directory) and validate every record"""
    path = Path(path)
    csv_path = path / INDEX_FILE if path.is_dir() else path
    root = csv_path.parent
    if not csv_path.exists():
        raise FileNotFoundError(f"no dataset index at {csv_path}")

    modes = DatasetModes()
    meta_path = root / META_FILE
    if meta_path.exists():
        with open(meta_path) as f:
            modes = DatasetModes(**json.load(f).get("modes", {}))

    frame = pd.read_csv(csv_path, dtype={"id": str, "street": str, "aerial": str, "split": str, "neighbors": str},
                        keep_default_na=False, float_precision="round_trip")
    missing = [c for c in INDEX_COLUMNS if c not in frame.columns]
    if missing:
        raise FormatError(f"{csv_path}: missing columns {missing}")

    records = []
    for row in frame.itertuples(index=False):
        try:
            location = GeoLocation(float(row.lat), float(row.lon))
            tile = AerialTile(GeoLocation(float(row.center_lat), float(row.center_lon)),
                              float(row.extent_m), modes.aerial_size)
        except ValueError as e:
            raise FormatError(f"{csv_path}: sample {row.id}: {e}") from e
        offset = (float(row.off_x_m), float(row.off_y_m))
        if not modes.offset and offset != (0.0, 0.0):
            raise FormatError(f"{csv_path}: sample {row.id} has an offset in aligned mode")
        if max(abs(offset[0]), abs(offset[1])) > tile.ground_extent_m / 2.0 + OFFSET_SLACK_M:
            raise FormatError(f"{csv_path}: sample {row.id} offset {offset} outside its tile")
        for rel in (row.street, row.aerial):
            if not (root / rel).exists():
                raise FormatError(f"{csv_path}: sample {row.id} references missing file {rel}")
        neighbors = tuple(n for n in str(row.neighbors).split(";") if n)
        records.append(SampleRecord(
            id=str(row.id), street=str(row.street), aerial=str(row.aerial), location=location,
            tile=tile, offset_m=offset, split=str(row.split), neighbors=neighbors,
        ))
    try:
        index = DatasetIndex(records, modes, root=root)
    except ValueError as e:
        raise FormatError(f"{csv_path}: {e}") from e
    logger.info(f"📂 Loaded {len(index)} samples from {csv_path}")
    return index


def query_offset_m(record: SampleRecord) -> Tuple[float, float]:
    """(east, north) of the query from its tile center, recomputed from coordinates"""
    return local_offset_m(record.location, record.tile.center)
