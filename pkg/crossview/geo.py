"""
Geometry utilities: polar transform of aerial tiles, great-circle distance
and the tile coverage predicate behind the hit rate.

Polar convention: output column 0 looks north, angles run clockwise, the
top row samples the circle at the tile edge and the bottom row the center.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ShapeError
from .sampling import bilinear_sample

EARTH_RADIUS_M = 6371000.0
METERS_PER_DEGREE = math.pi * EARTH_RADIUS_M / 180.0
# absorbs degree <-> meter round-off at the closed tile boundary
BOUNDARY_SLACK_M = 1e-6


@dataclass(frozen=True)
class GeoLocation:
    """Latitude / longitude in degrees on a spherical earth"""
    lat: float
    lon: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon < 180.0:
            raise ValueError(f"longitude {self.lon} outside [-180, 180)")


@dataclass(frozen=True)
class AerialTile:
    """Square ground region rendered as one aerial image"""
    center: GeoLocation
    ground_extent_m: float
    side_px: int

    def __post_init__(self):
        if self.ground_extent_m <= 0:
            raise ValueError(f"tile extent must be positive, got {self.ground_extent_m}")
        if self.side_px < 1:
            raise ValueError("tile side_px must be positive")


def _polar_grid(side: int, center_xy: Tuple[float, float], out_h: int, out_w: int) -> Tuple[np.ndarray, np.ndarray]:
    """Continuous (x, y) source coordinates of every output sample"""
    i = np.arange(out_h, dtype=np.float64)[:, None]
    j = np.arange(out_w, dtype=np.float64)[None, :]
    radius = (side / 2.0) * (out_h - i) / out_h
    theta = 2.0 * math.pi * j / out_w
    cx, cy = center_xy
    xs = cx + radius * np.sin(theta)
    ys = cy - radius * np.cos(theta)
    return xs, ys


def polar_transform_at(aerial: np.ndarray, query_px: Optional[Tuple[float, float]],
                       out_h: int, out_w: int) -> np.ndarray:
    """
    Polar warp around query_px = (x, y) in continuous image coordinates,
    where pixel (r, c) spans [c, c+1) x [r, r+1). None means the center.
    Samples outside the image square are zero; inside it, the half pixel
    beyond the outermost pixel centers clamps to the edge.
    """
    if aerial.ndim < 2 or aerial.shape[0] != aerial.shape[1]:
        raise ShapeError(f"polar transform needs a square image, got {aerial.shape[:2]}")
    side = aerial.shape[0]
    if query_px is None:
        query_px = (side / 2.0, side / 2.0)
    qx, qy = query_px
    if not (0.0 <= qx <= side and 0.0 <= qy <= side):
        raise ValueError(f"query {query_px} outside the {side}px image")
    xs, ys = _polar_grid(side, (qx, qy), out_h, out_w)
    inside = (xs >= 0.0) & (xs <= side) & (ys >= 0.0) & (ys <= side)
    out = bilinear_sample(aerial.astype(np.float64),
                          np.clip(ys - 0.5, 0.0, side - 1.0), np.clip(xs - 0.5, 0.0, side - 1.0))
    out[~inside] = 0.0
    return out.astype(aerial.dtype) if np.issubdtype(aerial.dtype, np.floating) else out


def polar_transform(aerial: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return polar_transform_at(aerial, None, out_h, out_w)


def geodesic_m(a: GeoLocation, b: GeoLocation) -> float:
    """Haversine great-circle distance in meters"""
    lat1, lon1, lat2, lon2 = map(math.radians, (a.lat, a.lon, b.lat, b.lon))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = math.sin(dlat / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2) ** 2
    return 2.0 * EARTH_RADIUS_M * math.atan2(math.sqrt(h), math.sqrt(max(0.0, 1.0 - h)))


def geodesic_m_vectorized(lats1, lons1, lats2, lons2) -> np.ndarray:
    lats1, lons1, lats2, lons2 = map(np.radians, (lats1, lons1, lats2, lons2))
    h = np.sin((lats2 - lats1) / 2) ** 2 + np.cos(lats1) * np.cos(lats2) * np.sin((lons2 - lons1) / 2) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arctan2(np.sqrt(h), np.sqrt(np.maximum(0.0, 1.0 - h)))


def wrap_lon(delta: float) -> float:
    """Longitude difference folded into [-180, 180)"""
    return (delta + 180.0) % 360.0 - 180.0


def local_offset_m(q: GeoLocation, origin: GeoLocation) -> Tuple[float, float]:
    """Equirectangular (east, north) offset of q from origin in meters"""
    east = wrap_lon(q.lon - origin.lon) * math.cos(math.radians(origin.lat)) * METERS_PER_DEGREE
    north = (q.lat - origin.lat) * METERS_PER_DEGREE
    return east, north


def covers(q: GeoLocation, tile: AerialTile) -> bool:
    """True when q lies inside the tile square, boundary included"""
    east, north = local_offset_m(q, tile.center)
    half = tile.ground_extent_m / 2.0 + BOUNDARY_SLACK_M
    return abs(east) <= half and abs(north) <= half


def offset_to_geo(east_m: float, north_m: float, origin: GeoLocation = GeoLocation(0.0, 0.0)) -> GeoLocation:
    """Inverse of local_offset_m around origin"""
    lat = origin.lat + north_m / METERS_PER_DEGREE
    lon = origin.lon + east_m / (METERS_PER_DEGREE * math.cos(math.radians(origin.lat)))
    return GeoLocation(lat, wrap_lon(lon))
