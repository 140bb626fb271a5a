"""Smoke test for the endomap_py extension.

Build and install first:
    pip install --no-build-isolation ./crates/py
Then run:
    python python/smoke_test.py
"""

import pathlib
import tempfile

import numpy as np

import endomap_py as em


def hemisphere(size=64, radius=28.0):
    c = (size - 1) / 2.0
    y, x = np.mgrid[0:size, 0:size].astype(float)
    r2 = radius**2 - (x - c) ** 2 - (y - c) ** 2
    z = np.sqrt(np.clip(r2, 0.0, None))
    inside = r2 > 0
    # Flat floor around the dome, lit head-on.
    img = np.where(inside, z / radius, 1.0)
    return img, z, inside


def test_sfs_recovers_hemisphere():
    img, z, inside = hemisphere(size=128, radius=50.0)
    depth = em.shape_from_shading(img, iters=200)
    assert depth.shape == img.shape
    keep = inside & (img > 0.3)
    r = em.depth_rms(np.where(keep, depth, np.nan), np.where(keep, z, np.nan))
    assert r["pixels"] == keep.sum()
    assert r["percent"] < 15.0, r


def test_light_and_vignette():
    img, _, inside = hemisphere()
    img = np.where(inside, img, 0.0)
    slant, tilt, albedo, fallback = em.estimate_light(img, ~inside)
    assert not fallback and slant < 0.3 and abs(albedo - 1.0) < 0.1
    flat = np.full((48, 48), 0.5)
    a, b, c = em.fit_vignette(flat)
    assert max(abs(a), abs(b), abs(c)) < 1e-6
    out = em.correct_vignetting(flat, -0.3, 0.0, 0.0)
    assert out.shape == flat.shape and out[24, 24] < out[0, 0]


def test_reflections():
    assert not em.detect_reflections(np.full((32, 32), 0.5)).any()
    img = np.full((64, 64), 0.3)
    img[28:36, 28:36] = 1.0
    m = em.detect_reflections(img)
    assert m.dtype == bool and m[32, 32]


def test_synth_and_pipeline():
    with tempfile.TemporaryDirectory() as d:
        files = em.synth_dataset(d, frames=3, size=64, seed=5)
        assert any(f.endswith("config.toml") for f in files)
        means = em.run_pipeline(str(pathlib.Path(d) / "config.toml"))
        assert means and all(np.isfinite(m) for _, m in means)
        assert (pathlib.Path(d) / "run" / "manifest.json").is_file()


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
            print(f"ok {name}")
