"""Log-polar pooling geometry for foveated image processing.

The visual field is tiled by cos^2-profiled windows: ``n_wedges`` angular
wedges crossed with ``n_rings`` log-spaced eccentricity rings, plus one
foveal window that absorbs the image center and any peripheral window whose
pixel support is too small to carry stable statistics. Window weights form
a partition of unity at every pixel, so per-region processing recombines
seamlessly.

Weights are separable in log-polar coordinates: a radial profile over
log-eccentricity with band width ``log(e_r / e_0) / n_rings`` and an
angular profile with band width ``2 pi / n_wedges``. Adjacent windows
overlap only inside the cosine transition band, where their profiles are
exact complements.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "GeometryError",
    "PoolingConfig",
    "RegionInfo",
    "RegionMask",
    "PoolingMasks",
    "smooth_step",
    "build_pooling_masks",
    "downsample_masks",
    "save_masks",
    "load_masks",
    "mask_cache_key",
    "cached_pooling_masks",
]

# Pixels whose window weight falls below this cutoff are treated as profile
# tail and excluded when measuring a region's support area against
# min_region_area. Calibrated so the five standard scales keep
# {294, 186, 125, 105, 90} peripheral regions at the default field of view;
# any cutoff in [0.05, 0.15] gives the same counts.
TAIL_WEIGHT_CUTOFF = 0.1

_MASK_FILE_MAGIC = b"FOVMASK1"


class GeometryError(ValueError):
    """Raised for pooling configs that cannot produce a valid tiling."""


@dataclass(frozen=True)
class PoolingConfig:
    """Parameters of the log-polar pooling grid.

    Attributes:
        scale: Rate of receptive-field growth with eccentricity. The radial
            band width of each ring is ``scale`` in log-eccentricity units,
            so ring radius grows roughly as ``scale * eccentricity``.
        visual_radius: Outer eccentricity of the modeled field, degrees.
        inner_eccentricity: Eccentricity where the peripheral grid starts,
            degrees.
        transition: Fraction of each band occupied by the cosine
            crossfade between neighboring windows, in (0, 1].
        image_size: Side of the square pixel grid.
        degrees_per_image: Visual half-width in degrees: the eccentricity
            at the image edge along an axis through the center. The
            visual_radius circle is inscribed in the image at the default
            settings; corner pixels beyond it are clamped to visual_radius.
        fovea_radius: Nominal foveal radius, degrees. Rings whose whole
            support lies inside this disk are grouped into the fovea.
        min_region_area: Minimum support area, in pixels above
            TAIL_WEIGHT_CUTOFF, below which a peripheral region is grouped
            into the fovea.
    """

    scale: float
    visual_radius: float = 26.0
    inner_eccentricity: float = 0.25
    transition: float = 0.5
    image_size: int = 512
    degrees_per_image: float = 26.0
    fovea_radius: float = 3.0
    min_region_area: int = 100

    def __post_init__(self) -> None:
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise GeometryError(f"scale must be positive, got {self.scale}")
        if not 0 < self.inner_eccentricity < self.visual_radius:
            raise GeometryError(
                "need 0 < inner_eccentricity < visual_radius, got "
                f"{self.inner_eccentricity} vs {self.visual_radius}"
            )
        if not 0 < self.transition <= 1:
            raise GeometryError(f"transition must be in (0, 1], got {self.transition}")
        if self.image_size <= 0:
            raise GeometryError(f"image_size must be positive, got {self.image_size}")
        if self.degrees_per_image <= 0:
            raise GeometryError(
                f"degrees_per_image must be positive, got {self.degrees_per_image}"
            )
        if self.fovea_radius < 0:
            raise GeometryError(f"fovea_radius must be >= 0, got {self.fovea_radius}")
        if self.min_region_area < 0:
            raise GeometryError(
                f"min_region_area must be >= 0, got {self.min_region_area}"
            )

    @property
    def log_span(self) -> float:
        return float(np.log(self.visual_radius / self.inner_eccentricity))

    @property
    def n_rings(self) -> int:
        """Number of eccentricity rings before foveal grouping."""
        n = int(round(self.log_span / self.scale))
        if n < 1:
            raise GeometryError(f"config yields {n} eccentricity rings (need >= 1)")
        return n

    @property
    def n_wedges(self) -> int:
        """Number of angular wedges; the angular band width is scale / 2."""
        n = int(round(4.0 * np.pi / self.scale))
        if n < 1:
            raise GeometryError(f"config yields {n} angular wedges (need >= 1)")
        return n

    @property
    def ring_log_width(self) -> float:
        return self.log_span / self.n_rings

    @property
    def wedge_width(self) -> float:
        return 2.0 * np.pi / self.n_wedges

    @property
    def pixels_per_degree(self) -> float:
        return (self.image_size / 2.0) / self.degrees_per_image


@dataclass(frozen=True)
class RegionInfo:
    """Per-window metadata.

    ring and wedge are grid indices (-1 for the fovea). z_degrees is the
    radial half-width of the ring profile at half maximum, in degrees; it
    is the single region-size number used by downstream calibration.
    """

    ring: int
    wedge: int
    is_fovea: bool
    z_degrees: float
    center_eccentricity: float


@dataclass(frozen=True)
class RegionMask:
    """One window's weights on a bounding-box patch of the pixel grid."""

    info: RegionInfo
    bbox: tuple[int, int, int, int]  # (y0, y1, x0, x1), half-open
    weights: np.ndarray  # float32, shape (y1 - y0, x1 - x0)

    def dense(self, size: int) -> np.ndarray:
        out = np.zeros((size, size), dtype=np.float32)
        y0, y1, x0, x1 = self.bbox
        out[y0:y1, x0:x1] = self.weights
        return out

    @property
    def weight_sum(self) -> float:
        return float(self.weights.sum(dtype=np.float64))


@dataclass(frozen=True)
class PoolingMasks:
    """A bank of pooling windows at one grid resolution.

    regions holds peripheral windows ordered by (ring, wedge) with the
    fovea last. The per-pixel sum of all windows is 1 everywhere on the
    grid (corner pixels are clamped to the outer ring), up to float32
    rounding.
    """

    config: PoolingConfig
    resolution: int
    regions: tuple[RegionMask, ...]

    def __len__(self) -> int:
        return len(self.regions)

    @property
    def fovea_index(self) -> int:
        for i, region in enumerate(self.regions):
            if region.info.is_fovea:
                return i
        raise GeometryError("mask bank has no foveal window")

    @property
    def n_peripheral(self) -> int:
        return sum(1 for r in self.regions if not r.info.is_fovea)

    def kept_rings(self) -> list[int]:
        return sorted({r.info.ring for r in self.regions if not r.info.is_fovea})

    def sum_map(self) -> np.ndarray:
        """Per-pixel sum of all window weights (float64)."""
        total = np.zeros((self.resolution, self.resolution), dtype=np.float64)
        for region in self.regions:
            y0, y1, x0, x1 = region.bbox
            total[y0:y1, x0:x1] += region.weights
        return total


def smooth_step(x, t_0: float):
    """Cos^2-profiled unit bump used for all window profiles.

    The profile is 1 on the plateau ``|x| <= (1 - t_0) / 2``, falls to 0
    over cosine transition bands of width ``t_0``, and is 0 outside
    ``|x| > (1 + t_0) / 2``. Its full width at half maximum is exactly 1,
    and shifted copies are complementary: ``f(x) + f(x - 1) = 1`` across
    the shared transition band, which is what makes banks of these windows
    sum to one.

    Args:
        x: Coordinate in units of the band width. Scalar or array.
        t_0: Transition fraction in (0, 1].

    Returns:
        Profile value(s) in [0, 1]; scalar in, float out.

    Raises:
        ValueError: If t_0 is outside (0, 1] or x is not finite.
    """
    if not 0 < t_0 <= 1:
        raise ValueError(f"transition must be in (0, 1], got {t_0}")
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("smooth_step requires finite input")
    plateau_lo = (t_0 - 1.0) / 2.0
    plateau_hi = (1.0 - t_0) / 2.0
    edge_lo = -(1.0 + t_0) / 2.0
    edge_hi = (1.0 + t_0) / 2.0
    out = np.zeros_like(arr)
    rising = (arr > edge_lo) & (arr <= plateau_lo)
    out[rising] = np.cos((np.pi / 2.0) * (arr[rising] - plateau_lo) / t_0) ** 2
    out[(arr > plateau_lo) & (arr <= plateau_hi)] = 1.0
    falling = (arr > plateau_hi) & (arr <= edge_hi)
    out[falling] = 1.0 - np.cos((np.pi / 2.0) * (arr[falling] - edge_hi) / t_0) ** 2
    if np.isscalar(x) or getattr(x, "ndim", None) == 0:
        return float(out)
    return out


def _pixel_polar_grid(config: PoolingConfig):
    """Log-eccentricity and angle of every pixel center, corner-clamped."""
    size = config.image_size
    ppd = config.pixels_per_degree
    coords = np.arange(size, dtype=np.float64) + 0.5 - size / 2.0
    xx, yy = np.meshgrid(coords, coords)
    ecc = np.hypot(xx, yy) / ppd
    np.minimum(ecc, config.visual_radius, out=ecc)
    theta = np.mod(np.arctan2(yy, xx), 2.0 * np.pi)
    log_ecc = np.log(np.maximum(ecc, 1e-12))
    return log_ecc, theta


def build_pooling_masks(config: PoolingConfig) -> PoolingMasks:
    """Build the full window bank for one config at image resolution.

    Peripheral windows are the product of a radial log-eccentricity
    profile and an angular profile, evaluated at each pixel center about
    the image center. Ring centers sit at ``log e_0 + ring_log_width * (n + 1)``
    so the outermost ring is centered on the visual radius; pixels past the
    inscribed visual-radius circle are clamped onto that ring. The foveal
    window is the pointwise complement of all kept peripheral windows, so
    it absorbs the central disk plus every region grouped away for having
    fewer than min_region_area supporting pixels.

    Raises:
        GeometryError: If the config derives fewer than one ring or wedge.
    """
    n_rings = config.n_rings
    n_wedges = config.n_wedges
    t_0 = config.transition
    w_e = config.ring_log_width
    w_t = config.wedge_width
    size = config.image_size
    ppd = config.pixels_per_degree
    half_support = (1.0 + t_0) / 2.0

    log_ecc, theta = _pixel_polar_grid(config)
    # Angular phase: wedge m is centered at phase m, support radius 0.75
    # bands, so each pixel can touch at most its two nearest wedges.
    phase = (theta - w_t * (1.0 - t_0) / 2.0) / w_t

    center_px = size / 2.0
    corner_radius = np.hypot(center_px, center_px)
    log_e0 = np.log(config.inner_eccentricity)

    regions: list[RegionMask] = []
    coverage = np.zeros((size, size), dtype=np.float64)

    for ring in range(n_rings):
        ring_center = log_e0 + w_e * (ring + 1)
        ecc_center = float(np.exp(ring_center))
        support_outer_deg = float(np.exp(ring_center + half_support * w_e))
        support_inner_deg = float(np.exp(ring_center - half_support * w_e))
        if support_outer_deg <= config.fovea_radius:
            continue  # whole ring inside the nominal fovea
        # Bounding box of the ring's support annulus; the outermost ring
        # also owns the clamped corner pixels.
        if ring_center + half_support * w_e >= np.log(config.visual_radius) - 1e-12:
            r_out_px = corner_radius
        else:
            r_out_px = support_outer_deg * ppd
        y0 = max(0, int(np.floor(center_px - r_out_px)))
        y1 = min(size, int(np.ceil(center_px + r_out_px)))
        if y0 >= y1:
            continue
        sub = np.s_[y0:y1, y0:y1]
        g = smooth_step((log_ecc[sub] - ring_center) / w_e, t_0)
        on = g > 0.0
        if not np.any(on):
            continue
        iy, ix = np.nonzero(on)
        g_on = g[iy, ix]
        phase_on = phase[sub][iy, ix]

        # Bucket pixels by nearest wedge; a wedge's support is its own
        # bucket plus the two neighbors.
        nearest = np.mod(np.rint(phase_on).astype(np.int64), n_wedges)
        order = np.argsort(nearest, kind="stable")
        sorted_nearest = nearest[order]
        bucket_edges = np.searchsorted(sorted_nearest, np.arange(n_wedges + 1))

        z_degrees = ecc_center * float(np.sinh(w_e / 2.0))
        info_base = dict(
            ring=ring,
            is_fovea=False,
            z_degrees=z_degrees,
            center_eccentricity=ecc_center,
        )
        for wedge in range(n_wedges):
            picks = []
            for neighbor in (wedge - 1, wedge, wedge + 1):
                b = neighbor % n_wedges
                picks.append(order[bucket_edges[b] : bucket_edges[b + 1]])
            idx = np.concatenate(picks)
            if idx.size == 0:
                continue
            delta = phase_on[idx] - wedge
            delta = np.mod(delta + n_wedges / 2.0, n_wedges) - n_wedges / 2.0
            inside = np.abs(delta) < half_support
            idx = idx[inside]
            if idx.size == 0:
                continue
            w = g_on[idx] * smooth_step(delta[inside], t_0)
            if np.count_nonzero(w >= TAIL_WEIGHT_CUTOFF) < config.min_region_area:
                continue  # grouped into the fovea
            ry = iy[idx]
            rx = ix[idx]
            by0, by1 = int(ry.min()), int(ry.max()) + 1
            bx0, bx1 = int(rx.min()), int(rx.max()) + 1
            patch = np.zeros((by1 - by0, bx1 - bx0), dtype=np.float32)
            patch[ry - by0, rx - bx0] = w.astype(np.float32)
            bbox = (y0 + by0, y0 + by1, y0 + bx0, y0 + bx1)
            regions.append(RegionMask(RegionInfo(wedge=wedge, **info_base), bbox, patch))
            coverage[bbox[0] : bbox[1], bbox[2] : bbox[3]] += patch
        del support_inner_deg  # support edges only matter through the checks above

    fovea = np.clip(1.0 - coverage, 0.0, 1.0).astype(np.float32)
    regions.append(
        RegionMask(
            RegionInfo(
                ring=-1,
                wedge=-1,
                is_fovea=True,
                z_degrees=0.0,
                center_eccentricity=0.0,
            ),
            (0, size, 0, size),
            fovea,
        )
    )
    return PoolingMasks(config=config, resolution=size, regions=tuple(regions))


def downsample_masks(masks: PoolingMasks, factor: int) -> PoolingMasks:
    """Block-mean the window bank down to a coarser grid.

    Block means are linear, so the partition of unity survives exactly
    (up to float rounding) and region metadata carries over unchanged.

    Raises:
        GeometryError: If factor does not divide the current resolution.
    """
    if factor < 1 or masks.resolution % factor != 0:
        raise GeometryError(
            f"factor {factor} does not divide mask resolution {masks.resolution}"
        )
    if factor == 1:
        return masks
    out = []
    for region in masks.regions:
        y0, y1, x0, x1 = region.bbox
        ay0, ay1 = (y0 // factor) * factor, -(-y1 // factor) * factor
        ax0, ax1 = (x0 // factor) * factor, -(-x1 // factor) * factor
        aligned = np.zeros((ay1 - ay0, ax1 - ax0), dtype=np.float64)
        aligned[y0 - ay0 : y1 - ay0, x0 - ax0 : x1 - ax0] = region.weights
        pooled = aligned.reshape(
            (ay1 - ay0) // factor, factor, (ax1 - ax0) // factor, factor
        ).mean(axis=(1, 3))
        out.append(
            RegionMask(
                region.info,
                (ay0 // factor, ay1 // factor, ax0 // factor, ax1 // factor),
                pooled.astype(np.float32),
            )
        )
    return PoolingMasks(
        config=masks.config,
        resolution=masks.resolution // factor,
        regions=tuple(out),
    )


def mask_cache_key(config: PoolingConfig) -> str:
    """Content hash identifying a config's mask bank."""
    payload = json.dumps(dataclasses.asdict(config), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def save_masks(masks: PoolingMasks, path) -> None:
    """Write a mask bank as one self-describing binary container.

    Layout: magic, little-endian uint64 header length, JSON header (config
    echo, resolution, per-region metadata with blob offsets), then the raw
    float32 little-endian weight patches in region order, row-major.
    """
    header_regions = []
    offset = 0
    for region in masks.regions:
        nbytes = region.weights.size * 4
        header_regions.append(
            {
                "ring": region.info.ring,
                "wedge": region.info.wedge,
                "is_fovea": region.info.is_fovea,
                "z_degrees": region.info.z_degrees,
                "center_eccentricity": region.info.center_eccentricity,
                "bbox": list(region.bbox),
                "offset": offset,
            }
        )
        offset += nbytes
    header = json.dumps(
        {
            "config": dataclasses.asdict(masks.config),
            "key": mask_cache_key(masks.config),
            "resolution": masks.resolution,
            "regions": header_regions,
        }
    ).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MASK_FILE_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for region in masks.regions:
            fh.write(np.ascontiguousarray(region.weights, dtype="<f4").tobytes())
    tmp.replace(path)


def load_masks(path) -> PoolingMasks:
    """Read a mask bank written by save_masks."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MASK_FILE_MAGIC))
        if magic != _MASK_FILE_MAGIC:
            raise GeometryError(f"{path}: not a mask container (bad magic {magic!r})")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len))
        blob = fh.read()
    config = PoolingConfig(**header["config"])
    regions = []
    for meta in header["regions"]:
        y0, y1, x0, x1 = meta["bbox"]
        count = (y1 - y0) * (x1 - x0)
        start = meta["offset"]
        weights = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        regions.append(
            RegionMask(
                RegionInfo(
                    ring=meta["ring"],
                    wedge=meta["wedge"],
                    is_fovea=meta["is_fovea"],
                    z_degrees=meta["z_degrees"],
                    center_eccentricity=meta["center_eccentricity"],
                ),
                (y0, y1, x0, x1),
                weights.reshape(y1 - y0, x1 - x0).copy(),
            )
        )
    return PoolingMasks(
        config=config, resolution=header["resolution"], regions=tuple(regions)
    )


def cached_pooling_masks(config: PoolingConfig, cache_dir) -> PoolingMasks:
    """Build masks or reuse a cached bank keyed by the config hash."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"masks-{mask_cache_key(config)[:16]}.fovmask"
    if path.exists():
        return load_masks(path)
    masks = build_pooling_masks(config)
    save_masks(masks, path)
    return masks
