import json
from pathlib import Path

import numpy as np
import pytest

from fovmet.features import (
    BlobSizeError,
    ChecksumError,
    ManifestError,
    ShapeChainError,
    decode,
    encode,
    load_weights,
    read_image,
    write_image,
    write_manifest,
    write_orthonormal_codec,
    write_toy_manifest,
    write_vgg_shaped_manifests,
)


def naive_conv2d(x, w, b):
    """Quadruple-loop valid convolution oracle (cross-correlation)."""
    c_out, c_in, ky, kx = w.shape
    _, h, width = x.shape
    out = np.zeros((c_out, h - ky + 1, width - kx + 1), dtype=np.float64)
    for o in range(c_out):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                acc = 0.0
                for c in range(c_in):
                    acc += float(np.sum(x[c, i : i + ky, j : j + kx] * w[o, c]))
                out[o, i, j] = acc + b[o]
    return out


def conv_only_manifest(tmp_path, w, b, input_hw):
    c_out, c_in, ky, kx = w.shape
    blob = w.astype("<f4").tobytes() + b.astype("<f4").tobytes()
    entry = {
        "kind": "convolution",
        "in_channels": c_in,
        "out_channels": c_out,
        "kernel": [ky, kx],
    }
    h, width = input_hw
    return write_manifest(
        tmp_path,
        "conv-only",
        (c_in, h, width),
        (c_out, h - ky + 1, width - kx + 1),
        [(entry, blob)],
    )


def test_convolution_matches_naive_oracle(tmp_path):
    rng = np.random.default_rng(7)
    for trial in range(5):
        x = rng.standard_normal((3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        manifest = load_weights(conv_only_manifest(tmp_path / str(trial), w, b, (8, 8)))
        got = encode(x, manifest)
        want = naive_conv2d(x, w, b)
        assert np.max(np.abs(got - want)) < 1e-5


def test_reflection_padding_matches_numpy(tmp_path):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 6, 6)).astype(np.float32)
    ident = np.zeros((2, 2, 1, 1), dtype=np.float32)
    ident[0, 0] = ident[1, 1] = 1.0
    layers = [
        ({"kind": "reflection-padding", "pad": 2}, None),
        (
            {"kind": "convolution", "in_channels": 2, "out_channels": 2, "kernel": [1, 1]},
            ident.astype("<f4").tobytes() + np.zeros(2, dtype="<f4").tobytes(),
        ),
    ]
    manifest = load_weights(write_manifest(tmp_path, "pad", (2, 6, 6), (2, 10, 10), layers))
    got = encode(x, manifest)
    want = np.pad(x, ((0, 0), (2, 2), (2, 2)), mode="reflect")
    assert np.array_equal(got, want)


def test_toy_manifest_shapes_and_determinism(tmp_path):
    manifest = load_weights(write_toy_manifest(tmp_path, input_size=32))
    assert manifest.output_shape == (16, 32, 32)
    rng = np.random.default_rng(0)
    img = rng.random((3, 32, 32), dtype=np.float32)
    a = encode(img, manifest)
    b = encode(img, manifest)
    assert a.shape == (16, 32, 32)
    assert np.array_equal(a, b)


def test_zero_image_zero_bias_encodes_to_zero(tmp_path):
    manifest = load_weights(write_toy_manifest(tmp_path, input_size=16))
    out = encode(np.zeros((3, 16, 16), dtype=np.float32), manifest)
    assert np.array_equal(out, np.zeros_like(out))


def test_orthonormal_roundtrip(tmp_path, codec_factory):
    enc, dec = codec_factory(image_size=64)
    rng = np.random.default_rng(11)
    img = rng.random((3, 64, 64), dtype=np.float32)
    recovered = decode(encode(img, enc), dec)
    assert np.max(np.abs(recovered - img)) < 1e-6


def test_decode_clamps_and_zero_path(tmp_path):
    _, dec_path = write_orthonormal_codec(tmp_path, image_size=16)
    dec = load_weights(dec_path)
    out = decode(np.zeros((3, 16, 16), dtype=np.float32), dec)
    assert np.array_equal(out, np.zeros_like(out))
    big = decode(np.full((3, 16, 16), 50.0, dtype=np.float32), dec)
    assert big.min() >= 0.0 and big.max() <= 1.0


def test_decode_post_process_hook(tmp_path):
    _, dec_path = write_orthonormal_codec(tmp_path, image_size=16)
    dec = load_weights(dec_path)
    feats = np.full((3, 16, 16), 0.25, dtype=np.float32)
    plain = decode(feats, dec)
    halved = decode(feats, dec, post_process=lambda img: img * 0.5)
    assert np.allclose(halved, plain * 0.5, atol=1e-7)


def test_encode_shape_mismatch(tmp_path):
    manifest = load_weights(write_toy_manifest(tmp_path, input_size=16))
    with pytest.raises(ValueError, match="shape"):
        encode(np.zeros((3, 8, 8), dtype=np.float32), manifest)


def test_truncated_blob_names_layer(tmp_path):
    path = write_toy_manifest(tmp_path, input_size=16)
    blob = next(Path(path).glob("*.f32"))
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(BlobSizeError, match=blob.name):
        load_weights(path)


def test_checksum_mismatch(tmp_path):
    path = write_toy_manifest(tmp_path, input_size=16)
    blob = next(Path(path).glob("*.f32"))
    raw = bytearray(blob.read_bytes())
    raw[0] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_weights(path)


def test_shape_chain_mismatch_detected(tmp_path):
    path = write_toy_manifest(tmp_path, input_size=16)
    manifest_file = Path(path) / "manifest.json"
    spec = json.loads(manifest_file.read_text())
    spec["output_shape"] = [16, 99, 99]
    manifest_file.write_text(json.dumps(spec))
    with pytest.raises(ShapeChainError, match="99"):
        load_weights(path)


def test_channel_chain_mismatch_detected(tmp_path):
    rng = np.random.default_rng(0)
    w = rng.standard_normal((4, 5, 3, 3)).astype(np.float32)
    blob = w.astype("<f4").tobytes() + np.zeros(4, dtype="<f4").tobytes()
    entry = {"kind": "convolution", "in_channels": 5, "out_channels": 4, "kernel": [3, 3]}
    # declared input has 3 channels, the convolution wants 5
    path = write_manifest(tmp_path, "badchain", (3, 8, 8), (4, 6, 6), [(entry, blob)])
    with pytest.raises(ShapeChainError, match="channels"):
        load_weights(path)


def test_pooling_odd_size_rejected(tmp_path):
    layers = [({"kind": "pooling", "size": 2, "mode": "max"}, None)]
    path = write_manifest(tmp_path, "badpool", (3, 15, 15), (3, 7, 7), layers)
    with pytest.raises(ShapeChainError, match="pool"):
        load_weights(path)


def test_unknown_layer_kind_rejected(tmp_path):
    path = write_manifest(tmp_path, "weird", (3, 8, 8), (3, 8, 8),
                          [({"kind": "attention"}, None)])
    with pytest.raises(ShapeChainError, match="attention"):
        load_weights(path)


def test_missing_field_rejected(tmp_path):
    path = write_toy_manifest(tmp_path, input_size=16)
    manifest_file = Path(path) / "manifest.json"
    spec = json.loads(manifest_file.read_text())
    del spec["checksum"]
    manifest_file.write_text(json.dumps(spec))
    with pytest.raises(ManifestError, match="checksum"):
        load_weights(path)


def test_invalid_json_rejected(tmp_path):
    (tmp_path / "manifest.json").write_text("{nope")
    with pytest.raises(ManifestError, match="JSON"):
        load_weights(tmp_path)


@pytest.mark.slow
def test_vgg_shaped_architecture_shapes(tmp_path):
    enc_path, dec_path = write_vgg_shaped_manifests(tmp_path, image_size=512)
    enc = load_weights(enc_path)
    dec = load_weights(dec_path)
    assert enc.output_shape == (512, 64, 64)
    assert dec.input_shape == (512, 64, 64)
    assert dec.output_shape == (3, 512, 512)
    rng = np.random.default_rng(5)
    img = rng.random((3, 512, 512), dtype=np.float32)
    feats = encode(img, enc)
    assert feats.shape == (512, 64, 64)
    out = decode(feats, dec)
    assert out.shape == (3, 512, 512)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_image_io_roundtrip(tmp_path):
    rng = np.random.default_rng(21)
    img = (rng.integers(0, 256, size=(3, 24, 24)) / 255.0).astype(np.float32)
    path = tmp_path / "img.png"
    write_image(path, img)
    back = read_image(path)
    assert back.shape == (3, 24, 24)
    assert np.array_equal(back, img)


def test_write_image_rejects_bad_shape(tmp_path):
    with pytest.raises(ValueError, match="image"):
        write_image(tmp_path / "x.png", np.zeros((24, 24), dtype=np.float32))
