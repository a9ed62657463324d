"""Regenerate the binary test fixtures (deterministic synthetic images)."""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
from PIL import Image


def synthetic_scene(width: int = 100, height: int = 100, seed: int = 0) -> Image.Image:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    rgb = np.stack([(xx * 255 // max(1, width - 1)), (yy * 255 // max(1, height - 1)),
                    rng.integers(0, 256, size=(height, width))], axis=-1).astype(np.uint8)
    return Image.fromarray(rgb, mode="RGB")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "tests" / "fixtures"))
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    synthetic_scene(100, 100, seed=0).save(out / "scene.png")
    synthetic_scene(120, 80, seed=1).save(out / "scene2.png")
    synthetic_scene(100, 100, seed=2).save(out / "imagined.png")
    print(f"wrote fixtures to {out}")


if __name__ == "__main__":
    main()
