"""Noise coloring, masked AdaIN, and the foveated metamer transform.

The metamer of an image I is decode(sum_i w_i [(1 - a_i) E_i(I) +
a_i S(E_i(N))]): inside each pooling window w_i the encoded image is
interpolated toward a stylized noise texture, and a single decode maps
the blended feature volume back to pixels. S renormalizes the encoded
noise so its channel statistics under the window match the window's
content statistics, which is what makes the distortion texture-preserving
rather than structure-preserving. The fovea is always interpolated with
a_i = 0, so foveal content survives exactly (up to the codec round trip).

The noise N starts as a seeded uniform field and is colored to the
content image's channel means, variances, and cross-channel covariance
before encoding, so its encoded statistics live in the same regime as the
content's.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import WeightManifest, decode, encode
from .geometry import PoolingMasks, downsample_masks

__all__ = [
    "RegionStats",
    "AlphaField",
    "ColoredNoise",
    "SynthesisResult",
    "color_noise",
    "compute_region_stats",
    "adain",
    "interpolate_target",
    "synthesize_metamer",
]

_ZERO_STD = 1e-12


@dataclass(frozen=True)
class RegionStats:
    """Per-channel weighted mean and population std under one window."""

    mean: np.ndarray  # (C,)
    std: np.ndarray  # (C,)

    def __post_init__(self):
        if np.any(self.std < 0) or not (
            np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.std))
        ):
            raise ValueError("region stats must be finite with std >= 0")


@dataclass(frozen=True)
class AlphaField:
    """One distortion strength per pooling window, fovea pinned to 0."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if np.any(v < 0) or np.any(v >= 1):
            raise ValueError("distortion strengths must lie in [0, 1)")
        object.__setattr__(self, "values", v)

    @classmethod
    def uniform(cls, alpha: float, masks: PoolingMasks) -> "AlphaField":
        v = np.full(len(masks), float(alpha))
        v[[i for i, r in enumerate(masks.regions) if r.info.is_fovea]] = 0.0
        return cls(v)

    @classmethod
    def from_callable(cls, strength_of_z, masks: PoolingMasks) -> "AlphaField":
        """Evaluate a z -> alpha rule (e.g. a fitted sigmoid) per window."""
        v = np.array(
            [
                0.0 if r.info.is_fovea else float(strength_of_z(r.info.z_degrees))
                for r in masks.regions
            ]
        )
        return cls(v)

    def validate_for(self, masks: PoolingMasks) -> None:
        if len(self.values) != len(masks):
            raise ValueError(
                f"alpha field has {len(self.values)} entries for {len(masks)} windows"
            )
        for i, region in enumerate(masks.regions):
            if region.info.is_fovea and self.values[i] != 0.0:
                raise ValueError("foveal distortion strength must be 0")


@dataclass(frozen=True)
class ColoredNoise:
    image: np.ndarray
    mean_only_channels: tuple[int, ...] = ()


@dataclass(frozen=True)
class SynthesisResult:
    image: np.ndarray
    metadata: dict = field(default_factory=dict)


def _sym_sqrt(matrix: np.ndarray, inverse: bool = False) -> np.ndarray:
    values, vectors = np.linalg.eigh(matrix)
    values = np.maximum(values, _ZERO_STD)
    powered = values**-0.5 if inverse else values**0.5
    return (vectors * powered) @ vectors.T


def color_noise(noise: np.ndarray, content: np.ndarray, clamp: bool = True) -> ColoredNoise:
    """Recolor a noise image to the content image's channel statistics.

    Symmetric whitening-recoloring: the noise is whitened by the inverse
    square root of its own channel covariance and recolored by the square
    root of the content's, then shifted to the content means. Channel
    means, variances, and cross-channel covariances then equal the
    content's exactly (before the final [0, 1] clamp; pass clamp=False to
    inspect the raw match).

    Content channels with zero variance cannot be covariance-matched and
    fall back to mean-only matching; their indices are reported in
    mean_only_channels.
    """
    noise = np.asarray(noise, dtype=np.float64)
    content = np.asarray(content, dtype=np.float64)
    if noise.shape != content.shape:
        raise ValueError(f"shape mismatch: noise {noise.shape} vs content {content.shape}")
    channels = noise.shape[0]
    flat_noise = noise.reshape(channels, -1)
    flat_content = content.reshape(channels, -1)

    mu_content = flat_content.mean(axis=1)
    var_content = flat_content.var(axis=1)
    live = np.nonzero(var_content > _ZERO_STD)[0]
    dead = tuple(int(c) for c in np.nonzero(var_content <= _ZERO_STD)[0])

    out = np.empty_like(flat_noise)
    for c in dead:
        out[c] = mu_content[c]
    if live.size:
        n_live = flat_noise[live]
        c_live = flat_content[live]
        mu_noise = n_live.mean(axis=1, keepdims=True)
        cov_noise = np.cov(n_live, bias=True)
        cov_content = np.cov(c_live, bias=True)
        cov_noise = np.atleast_2d(cov_noise)
        cov_content = np.atleast_2d(cov_content)
        transform = _sym_sqrt(cov_content) @ _sym_sqrt(cov_noise, inverse=True)
        out[live] = transform @ (n_live - mu_noise) + mu_content[live, None]
    result = out.reshape(noise.shape).astype(np.float32)
    if clamp:
        result = np.clip(result, 0.0, 1.0)
    return ColoredNoise(image=result, mean_only_channels=dead)


def _weighted_moments(patch: np.ndarray, weights: np.ndarray):
    """Per-channel weighted mean/population std of a (C, h, w) patch."""
    w64 = weights.astype(np.float64)
    total = w64.sum()
    if total <= 0:
        raise ValueError("window weights sum to zero")
    p64 = patch.astype(np.float64)
    mean = np.einsum("chw,hw->c", p64, w64) / total
    second = np.einsum("chw,hw->c", p64 * p64, w64) / total
    var = np.maximum(second - mean**2, 0.0)
    return mean, np.sqrt(var)


def _renormalize_patch(
    patch: np.ndarray,
    weights: np.ndarray,
    target_mean: np.ndarray,
    target_std: np.ndarray,
) -> np.ndarray:
    """Affine-map a patch so its weighted stats equal the target's.

    Applied uniformly across the window's support (weights only define
    the moments); channels with zero spread collapse to the target mean.
    """
    mean, std = _weighted_moments(patch, weights)
    scale = np.where(std > _ZERO_STD, target_std / np.maximum(std, _ZERO_STD), 0.0)
    offset = target_mean - mean * scale
    return patch * scale[:, None, None] + offset[:, None, None]


def compute_region_stats(features: np.ndarray, mask: np.ndarray) -> RegionStats:
    """Weighted mean and population std of each feature channel under a mask.

    Raises:
        ValueError: If the mask has zero total weight or wrong shape.
    """
    features = np.asarray(features)
    mask = np.asarray(mask)
    if features.shape[1:] != mask.shape:
        raise ValueError(
            f"mask shape {mask.shape} does not match features {features.shape[1:]}"
        )
    mean, std = _weighted_moments(features, mask)
    return RegionStats(mean=mean, std=std)


def adain(features: np.ndarray, target: RegionStats, mask: np.ndarray) -> np.ndarray:
    """Masked adaptive instance normalization.

    Inside the mask support every channel is affinely renormalized so its
    mask-weighted mean and std equal the target's; outside the support the
    input passes through untouched. Soft mask values only shape the
    moment estimates here; cross-window blending happens downstream in
    the metamer transform's weighted sum.
    """
    features = np.asarray(features, dtype=np.float32)
    mask = np.asarray(mask)
    if features.shape[1:] != mask.shape:
        raise ValueError(
            f"mask shape {mask.shape} does not match features {features.shape[1:]}"
        )
    support = mask > 0
    if not np.any(support):
        raise ValueError("window weights sum to zero")
    ys, xs = np.nonzero(support)
    y0, y1 = ys.min(), ys.max() + 1
    x0, x1 = xs.min(), xs.max() + 1
    patch = features[:, y0:y1, x0:x1]
    w = np.where(support[y0:y1, x0:x1], mask[y0:y1, x0:x1], 0.0)
    renorm = _renormalize_patch(patch, w, target.mean, target.std)
    out = features.copy()
    region = out[:, y0:y1, x0:x1]
    out[:, y0:y1, x0:x1] = np.where(
        support[y0:y1, x0:x1][None], renorm.astype(np.float32), region
    )
    return out


def interpolate_target(
    content: np.ndarray, stylized: np.ndarray, alpha: float
) -> np.ndarray:
    """Convex combination (1 - alpha) * content + alpha * stylized."""
    content = np.asarray(content)
    stylized = np.asarray(stylized)
    if content.shape != stylized.shape:
        raise ValueError(
            f"shape mismatch: content {content.shape} vs stylized {stylized.shape}"
        )
    # Inclusive upper endpoint: per-window strengths stay below 1, but the
    # pure-texture endpoint is still a valid interpolation.
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return (1.0 - alpha) * content + alpha * stylized


def synthesize_metamer(
    image: np.ndarray,
    seed: int,
    masks: PoolingMasks,
    encoder: WeightManifest,
    decoder: WeightManifest,
    alphas: AlphaField | None = None,
    gamma=None,
    post_process=None,
) -> SynthesisResult:
    """Synthesize a foveated metamer of an image.

    Exactly one of alphas / gamma selects the per-window distortion:
    alphas gives explicit strengths aligned with masks.regions, gamma is
    a callable mapping a window's radial extent z (degrees) to a strength
    in [0, 1). With all strengths zero the output equals the plain
    decode(encode(image)) round trip.

    The transform is deterministic in (image, seed, masks, weights): the
    noise field is drawn from a 64-bit-seeded generator recorded in the
    result metadata.

    Raises:
        ValueError: If mask resolution does not divide down to the encoder
            output resolution, or the alpha field does not fit the masks.
    """
    image = np.asarray(image, dtype=np.float32)
    if (alphas is None) == (gamma is None):
        raise ValueError("provide exactly one of alphas or gamma")
    if gamma is not None:
        alphas = AlphaField.from_callable(gamma, masks)
    alphas.validate_for(masks)

    content_features = encode(image, encoder)
    feat_h = content_features.shape[1]
    if content_features.shape[1] != content_features.shape[2]:
        raise ValueError("encoder output must be square")
    if masks.resolution % feat_h != 0:
        raise ValueError(
            f"mask resolution {masks.resolution} does not downsample to "
            f"encoder output {feat_h}"
        )
    feature_masks = downsample_masks(masks, masks.resolution // feat_h)

    rng = np.random.default_rng(np.uint64(seed))
    noise = rng.random(image.shape, dtype=np.float32)
    colored = color_noise(noise, image)
    noise_features = encode(colored.image, encoder)

    target = np.zeros(content_features.shape, dtype=np.float64)
    for region, alpha in zip(feature_masks.regions, alphas.values):
        y0, y1, x0, x1 = region.bbox
        w = region.weights
        content_patch = content_features[:, y0:y1, x0:x1]
        if region.info.is_fovea or alpha == 0.0:
            target[:, y0:y1, x0:x1] += w * content_patch
            continue
        mean, std = _weighted_moments(content_patch, w)
        stylized = _renormalize_patch(noise_features[:, y0:y1, x0:x1], w, mean, std)
        blended = interpolate_target(content_patch.astype(np.float64), stylized, alpha)
        target[:, y0:y1, x0:x1] += w * blended

    out = decode(target.astype(np.float32), decoder, post_process=post_process)
    metadata = {
        "seed": int(seed),
        "scale": masks.config.scale,
        "alphas": [float(a) for a in alphas.values],
        "encoder_checksum": encoder.checksum,
        "decoder_checksum": decoder.checksum,
        "noise_mean_only_channels": list(colored.mean_only_channels),
    }
    return SynthesisResult(image=out, metadata=metadata)
