#!/usr/bin/env python3
"""Builds the local datasets used by the MNIST-scale runs.

data/mnist/        gzipped IDX files (8000 train / 2000 test digits)
data/ood/mnist/    28x28 grayscale OOD test sets as gzipped IDX image files:
                   textures, natural, letters
data/aux/          natural-aux.idx3-ubyte.gz, auxiliary crops for outlier exposure

The digits come from the `mnist` npm package (10,000 MNIST digits stored as
JSON). Pass --mnist-package to reuse an unpacked copy; otherwise it is
fetched with `npm pack`.
"""

import argparse
import gzip
import json
import struct
import subprocess
import tarfile
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

SIZE = 28
FONT_DIR = Path("/usr/share/fonts/truetype/dejavu")


def fetch_package(work: Path) -> Path:
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=work, check=True, capture_output=True)
    tgz = next(work.glob("mnist-*.tgz"))
    with tarfile.open(tgz) as t:
        t.extractall(work)
    return work / "package"


def load_digits(package: Path):
    images, labels = [], []
    for d in range(10):
        data = json.loads((package / "src" / "digits" / f"{d}.json").read_text())["data"]
        arr = np.asarray(data, dtype=np.float64).reshape(-1, SIZE, SIZE)
        images.append(arr)
        labels.append(np.full(len(arr), d, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def write_idx_images(path: Path, images: np.ndarray):
    raw = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    with gzip.open(path, "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(raw), SIZE, SIZE))
        f.write(raw.tobytes())


def write_idx_labels(path: Path, labels: np.ndarray):
    with gzip.open(path, "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def save_set(path: Path, images: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    write_idx_images(path, images)
    print(f"{path.name}: {len(images)} images")


def build_mnist(package: Path, out: Path, test_per_class: int, rng):
    images, labels = load_digits(package)
    train_idx, test_idx = [], []
    for d in range(10):
        idx = rng.permutation(np.flatnonzero(labels == d))
        test_idx.extend(idx[:test_per_class])
        train_idx.extend(idx[test_per_class:])
    train_idx = rng.permutation(train_idx)
    test_idx = rng.permutation(test_idx)
    out.mkdir(parents=True, exist_ok=True)
    write_idx_images(out / "train-images-idx3-ubyte.gz", images[train_idx])
    write_idx_labels(out / "train-labels-idx1-ubyte.gz", labels[train_idx])
    write_idx_images(out / "t10k-images-idx3-ubyte.gz", images[test_idx])
    write_idx_labels(out / "t10k-labels-idx1-ubyte.gz", labels[test_idx])
    print(f"mnist: {len(train_idx)} train, {len(test_idx)} test -> {out}")


def gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img[..., :3] @ np.array([0.299, 0.587, 0.114])
    if img.max() > 1.0:
        img = img / 255.0
    return img


def crops(sources, count: int, rng, out: Path):
    images = np.zeros((count, SIZE, SIZE))
    for i in range(count):
        src = sources[i % len(sources)]
        h, w = src.shape
        side = int(rng.integers(32, min(h, w) // 2 + 1))
        y = int(rng.integers(0, h - side + 1))
        x = int(rng.integers(0, w - side + 1))
        patch = Image.fromarray(np.uint8(np.clip(src[y : y + side, x : x + side] * 255.0, 0, 255)))
        images[i] = np.asarray(patch.resize((SIZE, SIZE), Image.BILINEAR), dtype=np.float64) / 255.0
    save_set(out, images)


def letters(count: int, rng, out: Path):
    images = np.zeros((count, SIZE, SIZE))
    fonts = sorted(FONT_DIR.glob("*.ttf"))
    for i in range(count):
        glyph = "ABCDEFGHIJ"[i % 10]
        font = ImageFont.truetype(str(fonts[int(rng.integers(len(fonts)))]), int(rng.integers(16, 27)))
        img = Image.new("L", (SIZE, SIZE), 0)
        draw = ImageDraw.Draw(img)
        left, top, right, bottom = draw.textbbox((0, 0), glyph, font=font)
        gw, gh = right - left, bottom - top
        x = (SIZE - gw) / 2 - left + rng.integers(-2, 3)
        y = (SIZE - gh) / 2 - top + rng.integers(-2, 3)
        draw.text((x, y), glyph, fill=int(rng.integers(180, 256)), font=font)
        images[i] = np.asarray(img, dtype=np.float64) / 255.0
    save_set(out, images)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--mnist-package", type=Path, help="unpacked `mnist` npm package")
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parent.parent / "data")
    ap.add_argument("--ood-count", type=int, default=1000)
    ap.add_argument("--aux-count", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    import skimage.data as sk
    from sklearn.datasets import load_sample_images

    rng = np.random.default_rng(args.seed)
    with tempfile.TemporaryDirectory() as tmp:
        package = args.mnist_package or fetch_package(Path(tmp))
        build_mnist(package, args.out / "mnist", 200, rng)

    ood = args.out / "ood" / "mnist"
    crops([gray(f()) for f in (sk.brick, sk.grass, sk.gravel)], args.ood_count, rng, ood / "textures.idx3-ubyte.gz")
    natural = (sk.astronaut, sk.camera, sk.chelsea, sk.coffee, sk.rocket)
    crops([gray(f()) for f in natural], args.ood_count, rng, ood / "natural.idx3-ubyte.gz")
    letters(args.ood_count, rng, ood / "letters.idx3-ubyte.gz")

    aux = [gray(i) for i in load_sample_images().images]
    aux += [gray(f()) for f in (sk.hubble_deep_field, sk.immunohistochemistry, sk.coins, sk.clock, sk.retina, sk.horse)]
    crops(aux, args.aux_count, rng, args.out / "aux" / "natural-aux.idx3-ubyte.gz")


if __name__ == "__main__":
    main()
