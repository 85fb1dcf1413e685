"""Manifest-driven convolutional encoder and decoder.

Networks are ingested, never trained: a weight manifest is a directory
holding a JSON layer list plus one raw little-endian float32 blob per
convolution layer (kernel stored out-channel, in-channel, ky, kx
row-major, followed by the bias vector). The loader validates the layer
shape chain, every blob size, and a content checksum before anything runs.

Layer kinds: convolution, pointwise-nonlinearity (relu), pooling (2x2
max), upsampling (nearest), reflection-padding. That vocabulary covers
the VGG19-through-relu4_1 encoder, its mirror decoder, and the small toy
networks used for weight-free testing.

torch supplies the convolution/pooling arithmetic (pure inference, no
autograd); all public interfaces take and return numpy arrays. Images are
float32 (C, H, W) volumes in [0, 1].
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

__all__ = [
    "ManifestError",
    "ShapeChainError",
    "BlobSizeError",
    "ChecksumError",
    "LayerSpec",
    "WeightManifest",
    "load_weights",
    "encode",
    "decode",
    "read_image",
    "write_image",
    "write_manifest",
    "write_toy_manifest",
    "write_orthonormal_codec",
    "write_vgg_shaped_manifests",
]

MANIFEST_FILENAME = "manifest.json"


class ManifestError(ValueError):
    """Base class for weight-manifest validation failures."""


class ShapeChainError(ManifestError):
    """Layer-to-layer shape propagation contradicts the declaration."""


class BlobSizeError(ManifestError):
    """A weight blob's byte size does not match its declared kernel."""


class ChecksumError(ManifestError):
    """The manifest content checksum does not match the blob bytes."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network: kind plus kind-specific parameters.

    Convolution layers carry their kernel and bias arrays after loading;
    other kinds leave them None.
    """

    kind: str
    params: dict = field(default_factory=dict)
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None


@dataclass(frozen=True)
class WeightManifest:
    name: str
    input_shape: tuple[int, int, int]
    output_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    checksum: str


def _propagate_shape(shape, layer: LayerSpec, index: int):
    c, h, w = shape
    kind = layer.kind
    if kind == "reflection-padding":
        pad = int(layer.params["pad"])
        if pad < 0 or pad >= h or pad >= w:
            raise ShapeChainError(
                f"layer {index}: reflection pad {pad} invalid for {h}x{w} input"
            )
        return c, h + 2 * pad, w + 2 * pad
    if kind == "convolution":
        c_in = int(layer.params["in_channels"])
        c_out = int(layer.params["out_channels"])
        ky, kx = (int(k) for k in layer.params["kernel"])
        if c_in != c:
            raise ShapeChainError(
                f"layer {index}: convolution expects {c_in} channels, chain has {c}"
            )
        if ky > h or kx > w:
            raise ShapeChainError(
                f"layer {index}: kernel {ky}x{kx} larger than input {h}x{w}"
            )
        return c_out, h - ky + 1, w - kx + 1
    if kind == "pointwise-nonlinearity":
        if layer.params.get("activation", "relu") != "relu":
            raise ShapeChainError(
                f"layer {index}: unsupported activation {layer.params.get('activation')!r}"
            )
        return shape
    if kind == "pooling":
        size = int(layer.params.get("size", 2))
        if layer.params.get("mode", "max") != "max":
            raise ShapeChainError(f"layer {index}: unsupported pooling mode")
        if h % size or w % size:
            raise ShapeChainError(
                f"layer {index}: pooling size {size} does not divide {h}x{w}"
            )
        return c, h // size, w // size
    if kind == "upsampling":
        factor = int(layer.params.get("factor", 2))
        if layer.params.get("mode", "nearest") != "nearest":
            raise ShapeChainError(f"layer {index}: unsupported upsampling mode")
        return c, h * factor, w * factor
    raise ShapeChainError(f"layer {index}: unknown layer kind {kind!r}")


def load_weights(manifest_location) -> WeightManifest:
    """Load and validate a weight manifest with all blobs resident.

    Args:
        manifest_location: Directory containing ``manifest.json`` (plus
            blobs), or a direct path to the manifest file.

    Returns:
        A validated WeightManifest.

    Raises:
        ShapeChainError: Layer shapes do not chain to the declared output.
        BlobSizeError: A blob file's size disagrees with its kernel shape.
        ChecksumError: Blob bytes do not hash to the declared checksum.
        ManifestError: Structurally invalid manifest.
    """
    location = Path(manifest_location)
    manifest_path = location / MANIFEST_FILENAME if location.is_dir() else location
    base = manifest_path.parent
    try:
        spec = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{manifest_path}: invalid JSON ({exc})") from exc

    for key in ("name", "input_shape", "output_shape", "layers", "checksum"):
        if key not in spec:
            raise ManifestError(f"{manifest_path}: missing field {key!r}")

    digest = hashlib.sha256()
    layers: list[LayerSpec] = []
    for index, entry in enumerate(spec["layers"]):
        kind = entry.get("kind")
        params = {k: v for k, v in entry.items() if k not in ("kind", "blob")}
        weights = bias = None
        if kind == "convolution":
            if "blob" not in entry:
                raise ManifestError(f"layer {index}: convolution without blob")
            blob_path = base / entry["blob"]
            raw = blob_path.read_bytes()
            c_out = int(entry["out_channels"])
            c_in = int(entry["in_channels"])
            ky, kx = (int(k) for k in entry["kernel"])
            expected = 4 * (c_out * c_in * ky * kx + c_out)
            if len(raw) != expected:
                raise BlobSizeError(
                    f"layer {index} ({entry['blob']}): blob is {len(raw)} bytes, "
                    f"kernel {c_out}x{c_in}x{ky}x{kx} plus bias needs {expected}"
                )
            digest.update(raw)
            flat = np.frombuffer(raw, dtype="<f4")
            weights = flat[: c_out * c_in * ky * kx].reshape(c_out, c_in, ky, kx).copy()
            bias = flat[c_out * c_in * ky * kx :].copy()
        layers.append(LayerSpec(kind=kind, params=params, weights=weights, bias=bias))

    if digest.hexdigest() != spec["checksum"]:
        raise ChecksumError(
            f"{manifest_path}: checksum mismatch "
            f"(declared {spec['checksum'][:12]}.., blobs {digest.hexdigest()[:12]}..)"
        )

    input_shape = tuple(int(v) for v in spec["input_shape"])
    output_shape = tuple(int(v) for v in spec["output_shape"])
    shape = input_shape
    for index, layer in enumerate(layers):
        shape = _propagate_shape(shape, layer, index)
    if shape != output_shape:
        raise ShapeChainError(
            f"declared output shape {output_shape} but layers produce {shape}"
        )
    return WeightManifest(
        name=str(spec["name"]),
        input_shape=input_shape,
        output_shape=output_shape,
        layers=tuple(layers),
        checksum=spec["checksum"],
    )


def _run_layers(x: np.ndarray, manifest: WeightManifest) -> np.ndarray:
    with torch.no_grad():
        t = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)).unsqueeze(0)
        for layer in manifest.layers:
            if layer.kind == "reflection-padding":
                pad = int(layer.params["pad"])
                t = F.pad(t, (pad, pad, pad, pad), mode="reflect")
            elif layer.kind == "convolution":
                t = F.conv2d(
                    t,
                    torch.from_numpy(layer.weights),
                    torch.from_numpy(layer.bias),
                )
            elif layer.kind == "pointwise-nonlinearity":
                t = F.relu(t)
            elif layer.kind == "pooling":
                t = F.max_pool2d(t, int(layer.params.get("size", 2)))
            elif layer.kind == "upsampling":
                t = F.interpolate(
                    t, scale_factor=int(layer.params.get("factor", 2)), mode="nearest"
                )
            else:  # pragma: no cover - load_weights rejects unknown kinds
                raise ShapeChainError(f"unknown layer kind {layer.kind!r}")
        return t.squeeze(0).numpy()


def encode(image: np.ndarray, weights: WeightManifest) -> np.ndarray:
    """Forward an image through an encoder manifest.

    Args:
        image: float (C, H, W) array matching the manifest input shape.
        weights: Validated encoder manifest.

    Returns:
        float32 feature volume with the manifest's declared output shape.
    """
    image = np.asarray(image, dtype=np.float32)
    if tuple(image.shape) != weights.input_shape:
        raise ValueError(
            f"input shape {tuple(image.shape)} does not match manifest "
            f"{weights.input_shape}"
        )
    out = _run_layers(image, weights)
    if not np.all(np.isfinite(out)):
        raise ArithmeticError("encoder produced non-finite activations")
    return out


def decode(
    features: np.ndarray, weights: WeightManifest, post_process=None
) -> np.ndarray:
    """Forward features through a decoder manifest to an image in [0, 1].

    post_process, if given, is applied to the raw decoded volume before
    the final clamp; it is the hook point for an optional learned
    refinement stage.
    """
    features = np.asarray(features, dtype=np.float32)
    if tuple(features.shape) != weights.input_shape:
        raise ValueError(
            f"feature shape {tuple(features.shape)} does not match manifest "
            f"{weights.input_shape}"
        )
    out = _run_layers(features, weights)
    if post_process is not None:
        out = np.asarray(post_process(out), dtype=np.float32)
    return np.clip(out, 0.0, 1.0)


def read_image(path) -> np.ndarray:
    """Read an 8-bit RGB raster file into a float32 (3, H, W) [0,1] array."""
    with Image.open(path) as img:
        rgb = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(rgb.transpose(2, 0, 1))


def write_image(path, image: np.ndarray) -> None:
    """Write a float (C, H, W) [0,1] array as an 8-bit raster file."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ValueError(f"expected (1|3, H, W) image, got {image.shape}")
    arr = np.clip(image, 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


# ---------------------------------------------------------------------------
# Manifest writers (toy fixtures and architecture-scale random networks)


def _conv_blob(weights: np.ndarray, bias: np.ndarray) -> bytes:
    return (
        np.ascontiguousarray(weights, dtype="<f4").tobytes()
        + np.ascontiguousarray(bias, dtype="<f4").tobytes()
    )


def write_manifest(directory, name, input_shape, output_shape, layers) -> Path:
    """Serialize (layer spec, blob bytes) pairs as a manifest directory.

    layers is a sequence of (dict, bytes | None): the JSON entry for each
    layer and, for convolutions, the raw blob content. Returns the
    manifest directory path.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256()
    entries = []
    for index, (entry, blob) in enumerate(layers):
        entry = dict(entry)
        if blob is not None:
            blob_name = f"layer{index:03d}.f32"
            (directory / blob_name).write_bytes(blob)
            entry["blob"] = blob_name
            digest.update(blob)
        entries.append(entry)
    manifest = {
        "name": name,
        "input_shape": list(input_shape),
        "output_shape": list(output_shape),
        "layers": entries,
        "checksum": digest.hexdigest(),
    }
    (directory / MANIFEST_FILENAME).write_text(json.dumps(manifest, indent=1))
    return directory


def _conv_entry(c_in, c_out, k=3):
    return {
        "kind": "convolution",
        "in_channels": c_in,
        "out_channels": c_out,
        "kernel": [k, k],
    }


def write_toy_manifest(directory, input_size=64, channels=16, seed=0) -> Path:
    """Small conv+relu network: 3 -> channels, spatial size preserved."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((channels, 3, 3, 3)).astype(np.float32) * 0.1
    b = np.zeros(channels, dtype=np.float32)
    layers = [
        ({"kind": "reflection-padding", "pad": 1}, None),
        (_conv_entry(3, channels), _conv_blob(w, b)),
        ({"kind": "pointwise-nonlinearity", "activation": "relu"}, None),
    ]
    return write_manifest(
        directory,
        "toy-conv",
        (3, input_size, input_size),
        (channels, input_size, input_size),
        layers,
    )


def write_orthonormal_codec(directory, image_size=512, seed=0) -> tuple[Path, Path]:
    """Toy invertible codec: 1x1 orthonormal color rotation and its inverse.

    decode(encode(I)) recovers I to float32 rounding, which makes the
    pair a weight-free stand-in for a trained encoder/decoder in tests:
    feature space has the image's own resolution and three channels.
    """
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q.astype(np.float32)
    zero3 = np.zeros(3, dtype=np.float32)
    directory = Path(directory)
    enc = write_manifest(
        directory / "encoder",
        "orthonormal-encoder",
        (3, image_size, image_size),
        (3, image_size, image_size),
        [(_conv_entry(3, 3, k=1), _conv_blob(q[:, :, None, None], zero3))],
    )
    dec = write_manifest(
        directory / "decoder",
        "orthonormal-decoder",
        (3, image_size, image_size),
        (3, image_size, image_size),
        [(_conv_entry(3, 3, k=1), _conv_blob(q.T[:, :, None, None], zero3))],
    )
    return enc, dec


# Channel plan of the VGG19 stack through relu4_1 (conv layers between
# pooling stages); the decoder mirrors it with upsampling in place of
# pooling.
_VGG_PLAN = [(3, 64), (64, 64), "pool", (64, 128), (128, 128), "pool",
             (128, 256), (256, 256), (256, 256), (256, 256), "pool",
             (256, 512)]


def _random_conv(rng, c_in, c_out, k=3, gain=1.0):
    std = gain * math.sqrt(2.0 / (c_in * k * k))
    w = rng.standard_normal((c_out, c_in, k, k)).astype(np.float32) * std
    b = np.zeros(c_out, dtype=np.float32)
    return _conv_blob(w, b)


def write_vgg_shaped_manifests(directory, image_size=512, seed=0) -> tuple[Path, Path]:
    """Random-weight encoder/decoder with the VGG19-relu4_1 architecture.

    Useful for shape and wall-clock testing at production scale without
    shipping trained weights: a 512x512 RGB input encodes to 512x64x64.
    """
    rng = np.random.default_rng(seed)
    enc_layers = []
    for step in _VGG_PLAN:
        if step == "pool":
            enc_layers.append(({"kind": "pooling", "size": 2, "mode": "max"}, None))
            continue
        c_in, c_out = step
        enc_layers.append(({"kind": "reflection-padding", "pad": 1}, None))
        enc_layers.append((_conv_entry(c_in, c_out), _random_conv(rng, c_in, c_out)))
        enc_layers.append(({"kind": "pointwise-nonlinearity", "activation": "relu"}, None))
    feat_size = image_size // 8
    directory = Path(directory)
    enc = write_manifest(
        directory / "encoder",
        "vgg19-relu4_1-random",
        (3, image_size, image_size),
        (512, feat_size, feat_size),
        enc_layers,
    )

    dec_layers = []
    plan = list(reversed(_VGG_PLAN))
    last_conv = max(i for i, step in enumerate(plan) if step != "pool")
    for i, step in enumerate(plan):
        if step == "pool":
            dec_layers.append(({"kind": "upsampling", "factor": 2, "mode": "nearest"}, None))
            continue
        c_out, c_in = step  # mirrored
        dec_layers.append(({"kind": "reflection-padding", "pad": 1}, None))
        dec_layers.append((_conv_entry(c_in, c_out), _random_conv(rng, c_in, c_out)))
        if i != last_conv:  # final image layer stays linear, decode clamps
            dec_layers.append(
                ({"kind": "pointwise-nonlinearity", "activation": "relu"}, None)
            )
    dec = write_manifest(
        directory / "decoder",
        "vgg19-relu4_1-random-mirror",
        (512, feat_size, feat_size),
        (3, image_size, image_size),
        dec_layers,
    )
    return enc, dec
