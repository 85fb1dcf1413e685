import numpy as np
import pytest

from fovmet import features


@pytest.fixture(scope="session")
def codec_factory(tmp_path_factory):
    """Loaded orthonormal codec pairs, cached per image size."""
    cache = {}

    def get(image_size=512, seed=0):
        key = (image_size, seed)
        if key not in cache:
            root = tmp_path_factory.mktemp(f"codec{image_size}_{seed}")
            enc_path, dec_path = features.write_orthonormal_codec(
                root, image_size=image_size, seed=seed
            )
            cache[key] = (
                features.load_weights(enc_path),
                features.load_weights(dec_path),
            )
        return cache[key]

    return get


@pytest.fixture(scope="session")
def fixture_images():
    """Deterministic structured test images, float32 (3, 512, 512)."""
    rng = np.random.default_rng(1234)
    images = []
    yy, xx = np.mgrid[0:512, 0:512].astype(np.float32) / 512.0
    for k in range(5):
        base = np.stack(
            [
                0.5 + 0.45 * np.sin(2 * np.pi * ((k + 2) * xx + rng.uniform(0, 1))),
                0.5 + 0.45 * np.cos(2 * np.pi * ((k + 3) * yy + rng.uniform(0, 1))),
                0.5 + 0.45 * np.sin(2 * np.pi * (k + 1) * (xx + yy)),
            ]
        )
        noise = rng.normal(0.0, 0.08, size=base.shape).astype(np.float32)
        images.append(np.clip(base + noise, 0.0, 1.0).astype(np.float32))
    return images
