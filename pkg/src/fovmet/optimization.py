"""Per-region distortion-strength calibration against reference profiles.

Given reference per-ring quality scores (how strongly a trusted baseline
synthesis distorts each eccentricity ring), the search sweeps a uniform
distortion strength over a fixed grid, reads each ring's quality curve
from the sweep, and picks the strength whose score best matches the
reference for that ring. A one-parameter sigmoid

    gamma(z) = -1 + 2 / (1 + exp(-d z))

maps a ring's radial extent z (degrees) to its strength; gamma(0) = 0,
gamma is increasing for d > 0, and gamma < 1 for finite z. A label
permutation test then decides whether the per-scale fitted slopes differ
from the ensemble slope: if none do, one sigmoid serves every scale,
otherwise the slope is regressed on scale.

The quality comparison always targets the decoded reference image
decode(encode(I)), not the original: against the original, every ring's
best match collapses to zero distortion because the codec round trip
already costs similarity.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import iqa
from .features import WeightManifest, decode, encode
from .geometry import PoolingConfig, PoolingMasks, build_pooling_masks
from .styletransfer import AlphaField, synthesize_metamer

__all__ = [
    "GammaFunction",
    "GammaFamily",
    "DistortionProfile",
    "SynthContext",
    "GammaSearchError",
    "GammaSearchReport",
    "build_profile",
    "ring_blurred_baseline",
    "synthetic_profiles",
    "surrogate_loss",
    "find_alpha_star",
    "fit_gamma",
    "permutation_test",
    "run_gamma_search",
    "save_gamma",
    "load_gamma",
]

# Fixed shape constants of the sigmoid; only the slope d is ever fitted.
# With (a, b, c) = (-1, 2, 1) the curve passes through 0 at z = 0,
# increases monotonically, and saturates below 1.
GAMMA_A = -1.0
GAMMA_B = 2.0
GAMMA_C = 1.0
_MAX_SLOPE = 50.0

DEFAULT_GRID_STEP = 1.0 / 20.0


class GammaSearchError(RuntimeError):
    """A calibration sub-step failed; message carries (scale, ring) context."""


@dataclass(frozen=True)
class GammaFunction:
    """One-parameter sigmoid mapping radial extent (degrees) to strength."""

    d: float
    residual: float = 0.0
    n_points: int = 0
    provenance: str = "fit"

    def __call__(self, z):
        z = np.asarray(z, dtype=np.float64)
        val = GAMMA_A + GAMMA_B / (GAMMA_C + np.exp(-self.d * z))
        # float64 saturates to 1.0 near d*z ~ 37; cap just below so the
        # output remains a valid synthesis strength (strictly < 1)
        val = np.minimum(val, np.nextafter(1.0, 0.0))
        return float(val) if val.ndim == 0 else val

    def to_json(self) -> dict:
        return {
            "kind": "single",
            "d": self.d,
            "constants": {"a": GAMMA_A, "b": GAMMA_B, "c": GAMMA_C},
            "residual": self.residual,
            "n_points": self.n_points,
            "provenance": self.provenance,
        }


@dataclass(frozen=True)
class GammaFamily:
    """Scale-dependent slope: d(s) = intercept + slope_per_scale * s."""

    intercept: float
    slope_per_scale: float
    provenance: str = "fit"

    def slope_at(self, scale: float) -> float:
        return self.intercept + self.slope_per_scale * scale

    def gamma_for(self, scale: float) -> GammaFunction:
        return GammaFunction(d=self.slope_at(scale), provenance=self.provenance)

    def to_json(self) -> dict:
        return {
            "kind": "family",
            "intercept": self.intercept,
            "slope_per_scale": self.slope_per_scale,
            "constants": {"a": GAMMA_A, "b": GAMMA_B, "c": GAMMA_C},
            "provenance": self.provenance,
        }


def save_gamma(gamma, path) -> None:
    with open(path, "w") as fh:
        json.dump(gamma.to_json(), fh, indent=1)


def load_gamma(path):
    with open(path) as fh:
        data = json.load(fh)
    if data.get("kind") == "single":
        return GammaFunction(
            d=float(data["d"]),
            residual=float(data.get("residual", 0.0)),
            n_points=int(data.get("n_points", 0)),
            provenance=str(data.get("provenance", "file")),
        )
    if data.get("kind") == "family":
        return GammaFamily(
            intercept=float(data["intercept"]),
            slope_per_scale=float(data["slope_per_scale"]),
            provenance=str(data.get("provenance", "file")),
        )
    raise ValueError(f"{path}: unknown gamma record kind {data.get('kind')!r}")


@dataclass(frozen=True)
class DistortionProfile:
    """Per-ring reference quality scores to be matched by the search."""

    ring_scores: dict
    metric: str = "SSIM"
    provenance: str = "baseline-images"
    scale: float | None = None

    def __post_init__(self):
        for ring, score in self.ring_scores.items():
            if not -1.0 <= score <= 1.0:
                raise ValueError(f"ring {ring}: score {score} outside [-1, 1]")

    @classmethod
    def from_curve(cls, ring_scores: dict, metric="SSIM", scale=None):
        """Wrap an externally supplied per-ring curve verbatim."""
        return cls(
            ring_scores=dict(ring_scores),
            metric=metric,
            provenance="supplied-curve",
            scale=scale,
        )


def _pooled_metric_rings(a, b, masks: PoolingMasks, metric: str) -> dict:
    if metric == "SSIM":
        scores = iqa.pooled_score(iqa.ssim_map(a, b), masks)
    elif metric == "MS-SSIM":
        scores = iqa.pooled_ms_ssim(a, b, masks)
    elif metric == "IW-SSIM":
        scores = iqa.pooled_iw_ssim(a, b, masks)
    else:
        raise ValueError(f"unknown metric tag {metric!r}")
    return dict(scores.ring_curve())


def build_profile(reference_pairs, masks: PoolingMasks, metric="SSIM") -> DistortionProfile:
    """Average per-ring scores of (baseline image, original) pairs.

    Raises:
        ValueError: If any pair's resolution disagrees with the masks.
    """
    if not reference_pairs:
        raise ValueError("no reference pairs given")
    per_ring: dict[int, list] = {}
    for baseline, original in reference_pairs:
        baseline = np.asarray(baseline)
        original = np.asarray(original)
        if baseline.shape != original.shape or baseline.shape[-1] != masks.resolution:
            raise ValueError(
                f"pair shapes {baseline.shape}/{original.shape} do not match "
                f"mask resolution {masks.resolution}"
            )
        for ring, score in _pooled_metric_rings(baseline, original, masks, metric).items():
            per_ring.setdefault(ring, []).append(score)
    return DistortionProfile(
        ring_scores={r: float(np.mean(v)) for r, v in per_ring.items()},
        metric=metric,
        provenance="baseline-images",
        scale=masks.config.scale,
    )


def ring_blurred_baseline(image, masks: PoolingMasks, sigma_of_ring) -> np.ndarray:
    """Blend per-ring Gaussian blurs into one synthetic baseline image.

    sigma_of_ring maps a ring index to a blur sigma in pixels (fovea is
    ring -1). The partition of unity makes the blend seamless, which
    gives tests a baseline whose distortion grows ring by ring without
    running any synthesis.
    """
    from scipy import ndimage

    image = np.asarray(image, dtype=np.float64)
    sigmas = {}
    for region in masks.regions:
        ring = -1 if region.info.is_fovea else region.info.ring
        sigmas[ring] = float(sigma_of_ring(ring))
    blurred = {}
    for sigma in set(sigmas.values()):
        if sigma <= 0:
            blurred[sigma] = image
        else:
            blurred[sigma] = ndimage.gaussian_filter(
                image, sigma=(0, sigma, sigma), mode="reflect"
            )
    out = np.zeros_like(image)
    for region in masks.regions:
        ring = -1 if region.info.is_fovea else region.info.ring
        y0, y1, x0, x1 = region.bbox
        out[:, y0:y1, x0:x1] += region.weights * blurred[sigmas[ring]][:, y0:y1, x0:x1]
    return out.astype(np.float32)


class SynthContext:
    """Caches sweep metamers and their pooled scores for one scale.

    The distortion strength is swept uniformly over all peripheral
    windows; each ring's quality-vs-strength curve is read from the same
    sweep. Noise seeds are derived per image (seed + image index) so
    repeated queries and profile generation see identical realizations.
    """

    def __init__(self, images, masks: PoolingMasks, encoder: WeightManifest,
                 decoder: WeightManifest, metric: str = "SSIM", seed: int = 0):
        self.images = list(images)
        if not self.images:
            raise ValueError("context needs at least one image")
        self.masks = masks
        self.encoder = encoder
        self.decoder = decoder
        self.metric = metric
        self.seed = int(seed)
        self._decoded_refs = [None] * len(self.images)
        self._ring_cache: dict = {}

    @property
    def n_images(self) -> int:
        return len(self.images)

    def decoded_reference(self, j: int) -> np.ndarray:
        if self._decoded_refs[j] is None:
            self._decoded_refs[j] = decode(
                encode(self.images[j], self.encoder), self.decoder
            )
        return self._decoded_refs[j]

    def ring_score(self, j: int, alpha: float, ring: int) -> float:
        key = (j, round(float(alpha), 12))
        if key not in self._ring_cache:
            result = synthesize_metamer(
                self.images[j],
                self.seed + j,
                self.masks,
                self.encoder,
                self.decoder,
                alphas=AlphaField.uniform(alpha, self.masks),
            )
            self._ring_cache[key] = _pooled_metric_rings(
                result.image, self.decoded_reference(j), self.masks, self.metric
            )
        rings = self._ring_cache[key]
        if ring not in rings:
            raise ValueError(f"ring {ring} has no pooled score at this scale")
        return rings[ring]


def synthetic_profiles(
    gamma, images, encoder, decoder, config: PoolingConfig, scales,
    metric="SSIM", seed=0,
) -> dict:
    """Closed-loop reference profiles generated from a known strength rule.

    For each scale, images are distorted with per-window strengths
    gamma(z) and scored per ring against their decoded references; the
    resulting curves play the role of ingested baseline profiles in
    tests. Seeds match SynthContext's per-image convention.
    """
    profiles = {}
    for scale in scales:
        masks = build_pooling_masks(dataclasses.replace(config, scale=scale))
        per_ring: dict[int, list] = {}
        for j, image in enumerate(images):
            result = synthesize_metamer(
                image, seed + j, masks, encoder, decoder, gamma=gamma
            )
            reference = decode(encode(image, encoder), decoder)
            for ring, score in _pooled_metric_rings(
                result.image, reference, masks, metric
            ).items():
                per_ring.setdefault(ring, []).append(score)
        profiles[scale] = DistortionProfile(
            ring_scores={r: float(np.mean(v)) for r, v in per_ring.items()},
            metric=metric,
            provenance="baseline-images",
            scale=scale,
        )
    return profiles


def surrogate_loss(alpha: float, ring: int, profile: DistortionProfile, context) -> float:
    """Mean squared per-ring score gap between reference and sweep.

    Raises:
        ValueError: If the profile has no entry for the ring.
    """
    if ring not in profile.ring_scores:
        raise ValueError(f"profile has no entry for ring {ring}")
    target = profile.ring_scores[ring]
    gaps = [
        (target - context.ring_score(j, alpha, ring)) ** 2
        for j in range(context.n_images)
    ]
    return float(np.mean(gaps))


def find_alpha_star(
    ring: int, profile: DistortionProfile, context, grid_step: float = DEFAULT_GRID_STEP
) -> float:
    """Grid argmin of the surrogate loss; ties go to the smaller strength.

    Raises:
        ValueError: If every grid point evaluates to NaN.
    """
    grid = np.round(np.arange(0.0, 1.0 - 1e-12, grid_step), 12)
    losses = np.array(
        [surrogate_loss(float(a), ring, profile, context) for a in grid]
    )
    if np.all(np.isnan(losses)):
        raise ValueError(f"ring {ring}: surrogate loss is NaN on the whole grid")
    return float(grid[np.nanargmin(losses)])


def fit_gamma(points) -> GammaFunction:
    """Least-squares slope of the strength sigmoid through (z, alpha) points.

    Raises:
        ValueError: Fewer than 2 points, out-of-range values, or all
            points at z = 0 (slope unidentifiable).
    """
    pts = [(float(z), float(a)) for z, a in points]
    if len(pts) < 2:
        raise ValueError(f"need at least 2 points to fit, got {len(pts)}")
    z = np.array([p[0] for p in pts])
    alpha = np.array([p[1] for p in pts])
    if np.any(z < 0):
        raise ValueError("radial extents must be >= 0")
    if np.any((alpha < 0) | (alpha >= 1)):
        raise ValueError("strengths must lie in [0, 1)")
    if np.all(z == 0):
        raise ValueError("all points at z = 0: slope is unidentifiable")

    def loss(d):
        return float(np.sum((alpha - (GAMMA_A + GAMMA_B / (GAMMA_C + np.exp(-d * z)))) ** 2))

    result = optimize.minimize_scalar(
        loss, bounds=(0.0, _MAX_SLOPE), method="bounded",
        options={"xatol": 1e-10},
    )
    d = float(result.x)
    if loss(0.0) <= result.fun:
        d = 0.0
    return GammaFunction(d=d, residual=float(loss(d)), n_points=len(pts))


def permutation_test(per_scale_points: dict, n_samples: int = 10000, seed: int = 0) -> dict:
    """Scale-label permutation test of slope homogeneity.

    The statistic per scale is |d_scale - d_ensemble|. All (z, strength)
    points are pooled, scale labels are reshuffled preserving per-scale
    counts, and slopes are refitted; the p-value is the fraction of
    resamples with a statistic at least as large as observed (no +1
    smoothing, so n_samples = 1 yields p in {0, 1}).

    Raises:
        ValueError: Fewer than 2 scales, or any scale with < 2 points.
    """
    scales = sorted(per_scale_points)
    if len(scales) < 2:
        raise ValueError(f"need at least 2 scales, got {len(scales)}")
    for s in scales:
        if len(per_scale_points[s]) < 2:
            raise ValueError(f"scale {s}: need at least 2 points")
    pooled = [p for s in scales for p in per_scale_points[s]]
    counts = [len(per_scale_points[s]) for s in scales]
    d_ens = fit_gamma(pooled).d
    t_obs = {
        s: abs(fit_gamma(per_scale_points[s]).d - d_ens) for s in scales
    }
    rng = np.random.default_rng(seed)
    pooled_z = np.array([p[0] for p in pooled])
    pooled_a = np.array([p[1] for p in pooled])
    exceed = {s: 0 for s in scales}
    edges = np.concatenate([[0], np.cumsum(counts)])
    for _ in range(n_samples):
        perm = rng.permutation(len(pooled))
        for i, s in enumerate(scales):
            take = perm[edges[i] : edges[i + 1]]
            d_perm = fit_gamma(list(zip(pooled_z[take], pooled_a[take]))).d
            if abs(d_perm - d_ens) >= t_obs[s]:
                exceed[s] += 1
    return {s: exceed[s] / n_samples for s in scales}


@dataclass(frozen=True)
class GammaSearchReport:
    """Full calibration outcome: per-scale fits, test, and the final rule."""

    gamma: object  # GammaFunction or GammaFamily
    branch: str  # "scale-independent" or "scale-dependent"
    per_scale_d: dict
    ensemble_d: float
    p_values: dict
    alpha_tables: dict  # scale -> list of (ring, z_degrees, alpha_star)
    metric: str
    elapsed_s: float = 0.0

    def to_text(self) -> str:
        lines = [
            f"distortion-strength calibration ({self.metric})",
            f"branch: {self.branch}",
            f"ensemble slope d = {self.ensemble_d:.4f}",
        ]
        for s in sorted(self.per_scale_d):
            lines.append(
                f"  scale {s:g}: d = {self.per_scale_d[s]:.4f} "
                f"(p = {self.p_values[s]:.4f})"
            )
        if isinstance(self.gamma, GammaFamily):
            lines.append(
                f"slope regression: d(s) = {self.gamma.intercept:.4f} "
                f"+ {self.gamma.slope_per_scale:.4f} * s"
            )
        for s in sorted(self.alpha_tables):
            lines.append(f"  strengths at scale {s:g}:")
            for ring, z, alpha in self.alpha_tables[s]:
                lines.append(f"    ring {ring:2d} z={z:7.3f} deg  alpha*={alpha:.2f}")
        lines.append(f"elapsed: {self.elapsed_s:.1f} s")
        return "\n".join(lines)


def run_gamma_search(
    images,
    encoder: WeightManifest,
    decoder: WeightManifest,
    profiles: dict,
    config: PoolingConfig,
    scales=None,
    metric: str = "SSIM",
    grid_step: float = DEFAULT_GRID_STEP,
    n_permutation: int = 10000,
    seed: int = 0,
    p_threshold: float = 0.05,
) -> GammaSearchReport:
    """End-to-end strength calibration over a set of scales.

    For every requested scale: build masks, sweep the strength grid,
    match each ring's reference score, and fit a per-scale sigmoid slope.
    The permutation test then either certifies one scale-independent
    sigmoid (fitted on all points pooled) or emits a scale-dependent
    family with the slope linearly regressed on scale. scales defaults
    to every key of profiles.

    Raises:
        GammaSearchError: Any sub-step failure, annotated with the scale
            and ring where it occurred; also an empty scale list or a
            scale without a profile.
    """
    if scales is None:
        scales = sorted(profiles)
    scales = list(scales)
    if not scales:
        raise GammaSearchError("no scales requested")
    missing = [s for s in scales if s not in profiles]
    if missing:
        raise GammaSearchError(f"no profile for scales {missing}")
    started = time.perf_counter()
    per_scale_points: dict = {}
    alpha_tables: dict = {}
    per_scale_d: dict = {}
    for scale in sorted(scales):
        profile = profiles[scale]
        try:
            masks = build_pooling_masks(dataclasses.replace(config, scale=scale))
            context = SynthContext(images, masks, encoder, decoder, metric, seed)
            z_by_ring = {
                r.info.ring: r.info.z_degrees
                for r in masks.regions
                if not r.info.is_fovea
            }
            table = []
            points = []
            for ring in sorted(profile.ring_scores):
                if ring not in z_by_ring:
                    raise ValueError(f"profile ring {ring} not present in masks")
                alpha_star = find_alpha_star(ring, profile, context, grid_step)
                table.append((ring, z_by_ring[ring], alpha_star))
                points.append((z_by_ring[ring], alpha_star))
            per_scale_points[scale] = points
            alpha_tables[scale] = table
            per_scale_d[scale] = fit_gamma(points).d
        except Exception as exc:
            raise GammaSearchError(f"scale {scale}: {exc}") from exc

    pooled = [p for pts in per_scale_points.values() for p in pts]
    ensemble = fit_gamma(pooled)
    if len(per_scale_points) >= 2:
        p_values = permutation_test(per_scale_points, n_permutation, seed)
    else:
        p_values = {next(iter(per_scale_points)): 1.0}

    if all(p >= p_threshold for p in p_values.values()):
        branch = "scale-independent"
        gamma = GammaFunction(
            d=ensemble.d,
            residual=ensemble.residual,
            n_points=ensemble.n_points,
            provenance=f"ensemble:{metric}",
        )
    else:
        branch = "scale-dependent"
        scales = sorted(per_scale_d)
        slope, intercept = np.polyfit(
            np.array(scales), np.array([per_scale_d[s] for s in scales]), 1
        )
        gamma = GammaFamily(
            intercept=float(intercept),
            slope_per_scale=float(slope),
            provenance=f"regressed:{metric}",
        )
    return GammaSearchReport(
        gamma=gamma,
        branch=branch,
        per_scale_d=per_scale_d,
        ensemble_d=ensemble.d,
        p_values=p_values,
        alpha_tables=alpha_tables,
        metric=metric,
        elapsed_s=time.perf_counter() - started,
    )
