"""Procedural multi-class texture dataset with localized defects.

Each class is a texture family (stripes, checker, blobs, dots, waves) with a
class-specific frequency, orientation and palette. Defects are drawn from the
*other* classes where possible (foreign texture patches, foreign palette
colours), so a model that mixes up classes can reconstruct them cheaply.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

FAMILIES = ("stripes", "checker", "blobs", "dots", "waves")
DEFECTS = ("patch_swap", "scratch", "blotch")


def _class_spec(class_id: int, seed: int) -> dict:
    rng = np.random.default_rng([seed, 1000 + class_id])
    family = FAMILIES[class_id % len(FAMILIES)]
    hue = (class_id * 0.381966 + rng.random() * 0.1) % 1.0
    return {
        "family": family,
        "freq": float(rng.uniform(3.0, 6.0)),
        "angle": float(rng.uniform(0, math.pi)),
        "palette": (_hsv(hue, 0.65, 0.85), _hsv((hue + 0.5) % 1.0, 0.5, 0.3)),
        "seed": int(rng.integers(2**31 - 1)),
    }


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb, dtype=np.float64)


def _pattern(spec: dict, size: int, rng: np.random.Generator) -> np.ndarray:
    """Scalar field in [0, 1] for one image of the given class."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    freq = spec["freq"] * rng.uniform(0.95, 1.05)
    angle = spec["angle"] + rng.uniform(-0.08, 0.08)
    phase = rng.uniform(0, 2 * math.pi, size=2)
    u = xx * math.cos(angle) + yy * math.sin(angle)
    v = -xx * math.sin(angle) + yy * math.cos(angle)
    fam = spec["family"]
    if fam == "stripes":
        field = 0.5 + 0.5 * np.sin(2 * math.pi * freq * u + phase[0])
    elif fam == "checker":
        a = np.sin(2 * math.pi * freq * 0.6 * u + phase[0])
        b = np.sin(2 * math.pi * freq * 0.6 * v + phase[1])
        field = 0.5 + 0.5 * np.tanh(4 * a * b)
    elif fam == "blobs":
        noise = rng.standard_normal((size, size))
        field = ndimage.gaussian_filter(noise, sigma=size / (2.5 * freq), mode="wrap")
        field = (field - field.mean()) / (field.std() + 1e-8)
        field = 0.5 + 0.5 * np.tanh(1.5 * field)
    elif fam == "dots":
        gu = (freq * u * 1.2 + phase[0] / (2 * math.pi)) % 1.0 - 0.5
        gv = (freq * v * 1.2 + phase[1] / (2 * math.pi)) % 1.0 - 0.5
        r = np.sqrt(gu**2 + gv**2)
        field = 1.0 / (1.0 + np.exp((r - 0.28) * 30))
    else:  # waves
        field = 0.5 + 0.5 * np.sin(2 * math.pi * freq * u + 1.5 * np.sin(2 * math.pi * 2 * v + phase[1]) + phase[0])
    return field


def _render(spec: dict, size: int, rng: np.random.Generator) -> np.ndarray:
    field = _pattern(spec, size, rng)[..., None]
    c0, c1 = spec["palette"]
    img = field * c0 + (1 - field) * c1
    img = img * rng.uniform(0.95, 1.05) + rng.normal(0, 0.02, size=img.shape)
    return np.clip(img, 0, 1)


def _region_mask(size: int, rng: np.random.Generator, kind: str) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    lo, hi = int(size * 0.2), int(size * 0.8)
    cy, cx = rng.integers(lo, hi, size=2)
    if kind == "scratch":
        angle = rng.uniform(0, math.pi)
        length = rng.uniform(0.3, 0.5) * size
        width = max(1.0, size / 40)
        dy, dx = math.sin(angle), math.cos(angle)
        t = (yy - cy) * dy + (xx - cx) * dx
        d = np.abs((yy - cy) * dx - (xx - cx) * dy)
        return (d <= width) & (np.abs(t) <= length / 2)
    if kind == "blotch":
        ry, rx = rng.uniform(0.07, 0.13, size=2) * size
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    half = int(rng.integers(int(size * 0.08), int(size * 0.14) + 1))
    return (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)


def _add_defect(img, kind, specs, class_id, size, rng):
    others = [s for i, s in enumerate(specs) if i != class_id] or specs
    foreign = others[int(rng.integers(len(others)))]
    mask = _region_mask(size, rng, kind)
    out = img.copy()
    if kind == "patch_swap":
        out[mask] = _render(foreign, size, rng)[mask]
    else:
        colour = foreign["palette"][int(rng.integers(2))]
        alpha = 0.85 if kind == "blotch" else 1.0
        out[mask] = alpha * colour + (1 - alpha) * out[mask]
    return np.clip(out, 0, 1), mask


def _write_png(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG", optimize=False)


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def generate_synthetic_dataset(
    out_root,
    class_count: int = 3,
    train_per_class: int = 20,
    test_per_class: int = 10,
    defect_fraction: float = 0.5,
    seed: int = 0,
    image_size: int = 64,
) -> Path:
    """Write an MVTec-style synthetic dataset and return its root.

    The number of anomalous test images per class is
    ``ceil(defect_fraction * test_per_class)``.
    """
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    if not 0.0 < defect_fraction < 1.0:
        raise ValueError("defect_fraction must lie in (0, 1)")
    if train_per_class < 1 or test_per_class < 0:
        raise ValueError("train_per_class must be >= 1 and test_per_class >= 0")
    out_root = Path(out_root)
    try:
        out_root.mkdir(parents=True, exist_ok=True)
        probe = out_root / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output root {out_root} is not writable: {exc}") from exc

    specs = [_class_spec(c, seed) for c in range(class_count)]
    names = [f"c{c:02d}_{spec['family']}" for c, spec in enumerate(specs)]
    n_anom = math.ceil(defect_fraction * test_per_class) if test_per_class else 0

    for c, (spec, name) in enumerate(zip(specs, names)):
        rng = np.random.default_rng([seed, c])
        cdir = out_root / name
        for i in range(train_per_class):
            _write_png(cdir / "train" / "good" / f"{i:03d}.png", _to_u8(_render(spec, image_size, rng)))
        for i in range(test_per_class):
            img = _render(spec, image_size, rng)
            if i < n_anom:
                kind = DEFECTS[i % len(DEFECTS)]
                img, mask = _add_defect(img, kind, specs, c, image_size, rng)
                _write_png(cdir / "test" / kind / f"{i:03d}.png", _to_u8(img))
                _write_png(cdir / "ground_truth" / kind / f"{i:03d}_mask.png",
                           (mask.astype(np.uint8) * 255))
            else:
                _write_png(cdir / "test" / "good" / f"{i:03d}.png", _to_u8(img))

    meta = {
        "class_count": class_count,
        "train_per_class": train_per_class,
        "test_per_class": test_per_class,
        "defect_fraction": defect_fraction,
        "anomalous_per_class": n_anom,
        "seed": seed,
        "image_size": image_size,
        "classes": {n: {k: v for k, v in s.items() if k != "palette"} for n, s in zip(names, specs)},
    }
    (out_root / "synthetic.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out_root
