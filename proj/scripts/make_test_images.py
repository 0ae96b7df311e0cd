"""Regenerates the grayscale test images in tests/data from scikit-image samples.

astronaut (NASA, public domain) -> training image
camera (no known copyright restrictions) -> held-out evaluation image
"""
from pathlib import Path

import numpy as np
from skimage import color, data, transform

OUT = Path(__file__).resolve().parent.parent / "tests" / "data"


def to_u8(img):
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img):
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    astro = color.rgb2gray(data.astronaut())
    astro = transform.resize(astro, (256, 256), anti_aliasing=True)
    write_pgm(OUT / "astronaut_256.pgm", to_u8(astro))
    camera = transform.resize(data.camera() / 255.0, (256, 256), anti_aliasing=True)
    write_pgm(OUT / "camera_256.pgm", to_u8(camera))
    write_pgm(OUT / "astronaut_crop_64.pgm", to_u8(astro)[96:160, 96:160])


if __name__ == "__main__":
    main()
