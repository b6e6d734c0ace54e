#!/usr/bin/env python3
"""Regenerate the synthetic landscape fixture at tests/fixtures/meadow.png.

Deterministic: a sky gradient with soft clouds over a textured meadow with
repeated bushes, built from seeded noise only.  96x128 so the center-crop
paths have something to chew on.
"""

from pathlib import Path

import numpy as np


def _box_blur(a: np.ndarray, radius: int, passes: int = 3) -> np.ndarray:
    for _ in range(passes):
        for axis in (0, 1):
            k = 2 * radius + 1
            pad = [(radius, radius) if ax == axis else (0, 0) for ax in range(2)]
            padded = np.pad(a, pad, mode="reflect")
            csum = np.cumsum(padded, axis=axis)
            take_hi = np.take(csum, np.arange(k - 1, padded.shape[axis]), axis=axis)
            lo = np.take(csum, np.arange(0, padded.shape[axis] - k + 1), axis=axis)
            head = np.take(csum, [k - 1], axis=axis)
            a = np.concatenate([head, take_hi[1:] - lo[:-1]] if axis == 0 else
                               [head, take_hi[..., 1:] - lo[..., :-1]], axis=axis) / k
    return a


def make_meadow(height: int = 96, width: int = 128, seed: int = 20240817):
    rng = np.random.default_rng(seed)
    yy = np.linspace(0.0, 1.0, height)[:, None] * np.ones((1, width))
    horizon = 0.55

    sky_t = np.clip(yy / horizon, 0, 1)
    sky = np.stack([
        0.35 + 0.25 * sky_t,          # R
        0.55 + 0.25 * sky_t,          # G
        0.85 + 0.10 * sky_t,          # B
    ], axis=-1)
    clouds = _box_blur(rng.standard_normal((height, width)), 9)
    clouds = np.clip(clouds * 2.2, 0, None)[..., None] * np.array([0.10, 0.08, 0.05])
    sky = sky + clouds

    grass_base = np.stack([
        0.25 + 0.10 * (yy - horizon),
        0.45 + 0.18 * (yy - horizon),
        0.18 + 0.05 * (yy - horizon),
    ], axis=-1)
    texture = _box_blur(rng.standard_normal((height, width)), 1, passes=1)
    ripple = 0.06 * np.sin(2 * np.pi * (yy * 9.0 + 0.35 * texture))
    grass = grass_base + (0.10 * texture + ripple)[..., None] * np.array([0.8, 1.0, 0.5])

    img = np.where(yy[..., None] < horizon, sky, grass)

    xs = np.arange(width)[None, :]
    ys = np.arange(height)[:, None]
    for _ in range(10):
        cx = rng.uniform(6, width - 6)
        cy = rng.uniform(horizon * height + 4, height - 4)
        r = rng.uniform(2.5, 5.0)
        bump = np.exp(-(((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * r * r)))
        color = np.array([0.10, 0.22, 0.06]) + rng.uniform(-0.03, 0.03, 3)
        img = img + bump[..., None] * (color - img) * 0.9
    for _ in range(14):
        cx = rng.uniform(3, width - 3)
        cy = rng.uniform(horizon * height + 2, height - 2)
        bump = np.exp(-(((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * 1.2 ** 2)))
        img = img + bump[..., None] * np.array([0.45, 0.35, 0.05])

    return np.clip(img, 0.0, 1.0)


def main():
    from PIL import Image

    out = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "meadow.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    img = (make_meadow() * 255.0).round().astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(out)
    print(f"wrote {out} ({img.shape[1]}x{img.shape[0]})")


if __name__ == "__main__":
    main()
