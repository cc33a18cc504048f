"""Procedural paired-stain data.

Each pair starts from one structure map (nuclei, stroma texture, gland
regions) rendered under two color styles, so the two images share their
geometry exactly and the ideal aligned target exists by construction.
Misalignment is then injected into the input image only.

Dataset layout under `out_dir`:

    meta.json            n_train / n_test / level / seed / sizes
    manifest.jsonl       one record per pair: paths, level, affine, split
    pairs/<id>_*.png     8-bit RGB images, 64x64 by default

Test pairs are stored both aligned and misaligned so a model trained on
misaligned data can be scored on well-aligned data, and the misaligned
variant stays available for registration probes.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .misalign import level_spec, sample_affine, apply_misalignment
from .warp import AffineParams

__all__ = [
    "StructureMap",
    "ImagePair",
    "generate_structure",
    "render_stain",
    "build_dataset",
    "load_manifest",
    "load_image",
    "save_image",
    "STYLE_MATRICES",
    "STYLE_GAMMA",
]

SRC_SIZE = 160   # rendered source side; 4:1 context-to-crop ratio
CROP = 64

# rows: R, G, B; columns: nucleus, stroma, gland contribution. The
# column means of the two styles match, so the *linear* grayscale
# projections of both stains are identical fields: geometry is shared
# exactly while per-channel colors differ strongly.
STYLE_MATRICES = {
    "stain_A": np.array([[0.16, 0.62, 0.36],
                         [0.10, 0.44, 0.28],
                         [0.44, 0.58, 0.22]], dtype=np.float32),
    "stain_B": np.array([[0.4237, 0.4302, 0.3686],
                         [0.1658, 0.6990, 0.1502],
                         [0.1105, 0.5108, 0.3413]], dtype=np.float32),
}
STYLE_GAMMA = {"stain_A": 0.8, "stain_B": 1.2}


@dataclass
class StructureMap:
    nucleus: np.ndarray   # (H, W) in [0, 1]
    stroma: np.ndarray
    gland: np.ndarray
    seed: int

    def stacked(self) -> np.ndarray:
        return np.stack([self.nucleus, self.stroma, self.gland])


@dataclass
class ImagePair:
    x: np.ndarray                      # (3, H, W) float32 in [0, 1]
    y: np.ndarray
    y_ideal: np.ndarray | None = None  # aligned target, synthetic only
    gt_affine: AffineParams | None = None
    split: str = "train"


def _value_noise(rng: np.random.Generator, h: int, w: int, octaves: int = 4) -> np.ndarray:
    """Sum of bilinearly upsampled random grids with halving amplitude."""
    out = np.zeros((h, w), dtype=np.float64)
    amp, total = 1.0, 0.0
    cell = 32
    for _ in range(octaves):
        gh, gw = h // cell + 2, w // cell + 2
        grid = rng.random((gh, gw))
        yi = np.arange(h) / cell
        xi = np.arange(w) / cell
        i0 = yi.astype(int)
        j0 = xi.astype(int)
        fi = (yi - i0)[:, None]
        fj = (xi - j0)[None, :]
        g00 = grid[np.ix_(i0, j0)]
        g01 = grid[np.ix_(i0, j0 + 1)]
        g10 = grid[np.ix_(i0 + 1, j0)]
        g11 = grid[np.ix_(i0 + 1, j0 + 1)]
        layer = (g00 * (1 - fi) * (1 - fj) + g01 * (1 - fi) * fj
                 + g10 * fi * (1 - fj) + g11 * fi * fj)
        out += amp * layer
        total += amp
        amp *= 0.5
        cell = max(2, cell // 2)
    return (out / total).astype(np.float32)


def generate_structure(seed: int, h: int, w: int) -> StructureMap:
    """Deterministic tissue-like structure: value-noise stroma, 40-120
    Gaussian nucleus splats (radius 2-5 px), 1-3 soft gland blobs."""
    if h < 64 or w < 64:
        raise ValueError(f"structure maps need dims >= 64, got {h}x{w}")
    rng = np.random.default_rng(seed)
    stroma = _value_noise(rng, h, w)

    nucleus = np.zeros((h, w), dtype=np.float32)
    count = int(rng.integers(40, 121))
    for _ in range(count):
        ci = rng.uniform(0, h - 1)
        cj = rng.uniform(0, w - 1)
        radius = rng.uniform(2.0, 5.0)
        sigma = radius / 2.0
        r = int(np.ceil(3 * sigma))
        i0, i1 = max(0, int(ci) - r), min(h, int(ci) + r + 1)
        j0, j1 = max(0, int(cj) - r), min(w, int(cj) + r + 1)
        ii = np.arange(i0, i1, dtype=np.float32)[:, None] - ci
        jj = np.arange(j0, j1, dtype=np.float32)[None, :] - cj
        nucleus[i0:i1, j0:j1] += np.exp(-(ii * ii + jj * jj) / (2 * sigma * sigma))
    np.clip(nucleus, 0.0, 1.0, out=nucleus)

    gland = np.zeros((h, w), dtype=np.float32)
    for _ in range(int(rng.integers(1, 4))):
        ci = rng.uniform(0.2 * h, 0.8 * h)
        cj = rng.uniform(0.2 * w, 0.8 * w)
        radius = rng.uniform(min(h, w) / 8, min(h, w) / 4)
        ii = np.arange(h, dtype=np.float32)[:, None] - ci
        jj = np.arange(w, dtype=np.float32)[None, :] - cj
        d = np.sqrt(ii * ii + jj * jj)
        z = np.clip((d - radius) / (0.08 * radius), -40.0, 40.0)
        gland += 1.0 / (1.0 + np.exp(z))
    np.clip(gland, 0.0, 1.0, out=gland)

    return StructureMap(nucleus=nucleus, stroma=stroma, gland=gland, seed=seed)


def render_stain(smap: StructureMap, style: str) -> np.ndarray:
    """(3, H, W) image: style matrix applied per pixel, clipped, then a
    per-style gamma. The two styles differ only in color statistics."""
    if style not in STYLE_MATRICES:
        raise ValueError(f"unknown style {style!r}")
    s = smap.stacked()  # (3, H, W)
    rgb = np.einsum("rc,chw->rhw", STYLE_MATRICES[style], s)
    np.clip(rgb, 0.0, 1.0, out=rgb)
    return np.power(rgb, np.float32(STYLE_GAMMA[style]), dtype=np.float32)


def save_image(img: np.ndarray, path) -> None:
    from PIL import Image

    arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path)


def load_image(path) -> np.ndarray:
    from PIL import Image

    arr = np.asarray(Image.open(path), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _sig9(v: float) -> float:
    return float(f"{v:.9g}")


def build_dataset(n_train: int, n_test: int, level: int, seed: int, out_dir,
                  src_size: int = SRC_SIZE, crop: int = CROP) -> Path:
    """Write a full dataset; returns the manifest path.

    Train pairs carry per-pair misalignment at `level`; test pairs are
    written both aligned and misaligned. Structure seeds of train and
    test are disjoint; the per-pair transform noise is level-independent
    (only its amplitude changes with `level`), so datasets built at
    different levels from one seed share identical noise sequences.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("need at least one pair per split")
    spec = level_spec(level)
    # no clamp artifacts may reach the crop window (border-safety margin)
    margin = src_size * (1.0 - 2.0 * (spec.trans_max + spec.scale_max))
    if crop > margin:
        raise ValueError(f"crop {crop} too large for level {level} on side {src_size} "
                         f"(needs <= {margin:.0f})")

    out = Path(out_dir)
    pairs_dir = out / "pairs"
    pairs_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.jsonl"

    records = []
    for split, n, skey, tkey in (("train", n_train, 0, 2), ("test", n_test, 1, 3)):
        for i in range(n):
            smap = generate_structure_from_key([seed, skey, i], src_size, src_size)
            x_src = render_stain(smap, "stain_A")
            y_src = render_stain(smap, "stain_B")
            base = ImagePair(x=x_src, y=y_src, y_ideal=y_src, split=split)
            params = sample_affine(spec, np.random.default_rng([seed, tkey, i]))
            pair = apply_misalignment(base, params, crop)
            pid = f"{split}_{i:05d}"
            files = {}
            save_image(pair.x, pairs_dir / f"{pid}_x.png")
            files["x"] = f"pairs/{pid}_x.png"
            save_image(pair.y, pairs_dir / f"{pid}_y.png")
            files["y"] = f"pairs/{pid}_y.png"
            if split == "test":
                aligned = apply_misalignment(base, AffineParams(), crop)
                save_image(aligned.x, pairs_dir / f"{pid}_x_aligned.png")
                files["x_aligned"] = f"pairs/{pid}_x_aligned.png"
                # the aligned render is the ideal target by construction
                files["y_ideal"] = files["y"]
            records.append({
                "id": pid,
                "split": split,
                "level": level,
                "files": files,
                "affine": {k: _sig9(v) for k, v in params.to_dict().items()},
            })

    with open(manifest_path, "w", encoding="ascii") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    meta = {"n_train": n_train, "n_test": n_test, "level": level, "seed": seed,
            "src_size": src_size, "crop": crop,
            "manifest_crc32": zlib.crc32(manifest_path.read_bytes())}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return manifest_path


def generate_structure_from_key(key: list[int], h: int, w: int) -> StructureMap:
    """Structure generation seeded by a composite key (split isolation)."""
    rng = np.random.default_rng(key)
    seed = int(rng.integers(0, 2 ** 31 - 1))
    return generate_structure(seed, h, w)


def load_manifest(manifest_path) -> list[dict]:
    path = Path(manifest_path)
    with open(path, encoding="ascii") as fh:
        return [json.loads(line) for line in fh if line.strip()]
