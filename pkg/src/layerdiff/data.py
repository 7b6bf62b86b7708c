"""Synthetic captioned shape images plus a folder loader.

Each example is one or two anti-aliased colored shapes on a uniform gray
background, with a caption like "red circle center" built from a fixed
vocabulary. Captions are a bijection onto the shape parameters, which makes
text-image alignment mechanically checkable after training.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterator, List

import numpy as np
from PIL import Image

__all__ = [
    "COLORS",
    "SHAPES",
    "POSITIONS",
    "Vocabulary",
    "Example",
    "Dataset",
    "generate_shapes",
    "load_folder",
    "batch_iter",
    "tokenize",
    "encode_png",
    "decode_png",
    "MAX_TOKENS",
    "BACKGROUND_GRAY",
]

COLORS = {
    "red": (0.92, 0.10, 0.10),
    "green": (0.10, 0.85, 0.15),
    "blue": (0.12, 0.20, 0.92),
    "yellow": (0.95, 0.90, 0.10),
    "white": (0.97, 0.97, 0.97),
    "black": (0.03, 0.03, 0.03),
}
SHAPES = ("circle", "square", "triangle")
POSITIONS = {
    "left": (0.25, 0.5),
    "right": (0.75, 0.5),
    "top": (0.5, 0.25),
    "bottom": (0.5, 0.75),
    "center": (0.5, 0.5),
}

BACKGROUND_GRAY = 0.42  # keeps both white and black shapes visible
MAX_TOKENS = 7  # "red circle center and blue square left"

PAD, UNK = "<pad>", "<unk>"


class Vocabulary:
    """Fixed word list with stable ids across runs."""

    def __init__(self):
        words = [PAD, UNK, "and"]
        words += list(COLORS) + list(SHAPES) + list(POSITIONS)
        self.words = tuple(words)
        self.ids = {w: i for i, w in enumerate(words)}
        self.pad_id = self.ids[PAD]
        self.unk_id = self.ids[UNK]

    def __len__(self):
        return len(self.words)


VOCAB = Vocabulary()


def tokenize(caption: str, max_tokens: int = MAX_TOKENS) -> np.ndarray:
    ids = [VOCAB.ids.get(w, VOCAB.unk_id) for w in caption.split()][:max_tokens]
    ids += [VOCAB.pad_id] * (max_tokens - len(ids))
    return np.asarray(ids, dtype=np.int64)


@dataclass
class Example:
    image: np.ndarray  # [3, H, W] in [-1, 1]
    caption: str
    tokens: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.tokens is None:
            self.tokens = tokenize(self.caption)


@dataclass
class Dataset:
    examples: List[Example]
    resolution: int

    def __len__(self):
        return len(self.examples)

    def __getitem__(self, idx):
        return self.examples[idx]

    def stacked(self, indices=None):
        """(images [N,3,H,W], tokens [N,L]) for the given indices."""
        ex = self.examples if indices is None else [self.examples[i] for i in indices]
        return (
            np.stack([e.image for e in ex]),
            np.stack([e.tokens for e in ex]),
        )


def _render_shape(canvas: np.ndarray, shape: str, color, cx: float, cy: float,
                  radius: float) -> None:
    """Paint one shape onto an [3, S, S] supersampled canvas in place."""
    s = canvas.shape[-1]
    ys, xs = np.mgrid[0:s, 0:s]
    x = (xs + 0.5) / s - cx
    y = (ys + 0.5) / s - cy
    if shape == "circle":
        mask = x * x + y * y <= radius * radius
    elif shape == "square":
        mask = (np.abs(x) <= radius) & (np.abs(y) <= radius)
    elif shape == "triangle":
        # upward triangle inscribed in the radius
        mask = (y <= radius) & (np.abs(x) * 2.0 <= (radius - y))
    else:
        raise ValueError(f"unknown shape: {shape}")
    for ch in range(3):
        canvas[ch][mask] = color[ch]


def _render_example(resolution: int, specs) -> np.ndarray:
    """Render shape specs with 4x supersampling; returns [3, R, R] in [-1, 1]."""
    ss = 4
    canvas = np.full((3, resolution * ss, resolution * ss), BACKGROUND_GRAY,
                     dtype=np.float64)
    for color_name, shape, pos_name in specs:
        cx, cy = POSITIONS[pos_name]
        _render_shape(canvas, shape, COLORS[color_name], cx, cy, radius=0.17)
    down = canvas.reshape(3, resolution, ss, resolution, ss).mean(axis=(2, 4))
    return (down * 2.0 - 1.0).astype(np.float32)


def generate_shapes(n: int, resolution: int, seed: int,
                    two_shape_prob: float = 0.3) -> Dataset:
    """Deterministic dataset of single- or two-shape captioned images."""
    if resolution < 16 or resolution & (resolution - 1):
        raise ValueError(f"resolution must be a power of two >= 16, got {resolution}")
    rng = np.random.Generator(np.random.PCG64(seed))
    color_names = list(COLORS)
    pos_names = list(POSITIONS)
    examples = []
    for _ in range(n):
        k = 2 if rng.random() < two_shape_prob else 1
        specs = []
        used_pos = []
        for _ in range(k):
            avail = [p for p in pos_names if p not in used_pos]
            pos = avail[rng.integers(len(avail))]
            used_pos.append(pos)
            specs.append((
                color_names[rng.integers(len(color_names))],
                SHAPES[rng.integers(len(SHAPES))],
                pos,
            ))
        caption = " and ".join(" ".join(s) for s in specs)
        examples.append(Example(_render_example(resolution, specs), caption))
    return Dataset(examples, resolution)


def parse_caption(caption: str):
    """Inverse of the caption renderer: list of (color, shape, position)."""
    specs = []
    for part in caption.split(" and "):
        color, shape, pos = part.split()
        if color not in COLORS or shape not in SHAPES or pos not in POSITIONS:
            raise ValueError(f"unparseable caption part: {part!r}")
        specs.append((color, shape, pos))
    return specs


def encode_png(image: np.ndarray, path: str) -> None:
    """[-1,1] float [3,H,W] -> 8-bit RGB PNG, round-half-even."""
    arr = np.clip((np.asarray(image) + 1.0) * 127.5, 0.0, 255.0)
    arr = np.rint(arr).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def decode_png(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return (arr / 127.5 - 1.0).transpose(2, 0, 1)


def load_folder(path: str, captions_file: str, resolution: int) -> Dataset:
    """Load "filename<TAB>caption" pairs; images resized bilinearly."""
    errors = []
    examples = []
    try:
        with open(captions_file, encoding="utf-8") as fp:
            lines = [ln.rstrip("\n") for ln in fp if ln.strip()]
    except OSError as exc:
        raise FileNotFoundError(f"captions file {captions_file}: {exc}") from exc
    for ln in lines:
        if "\t" not in ln:
            errors.append(f"malformed line (no tab): {ln!r}")
            continue
        fname, caption = ln.split("\t", 1)
        fpath = os.path.join(path, fname)
        if not os.path.exists(fpath):
            errors.append(f"missing image: {fpath}")
            continue
        try:
            with Image.open(fpath) as im:
                im = im.convert("RGB").resize(
                    (resolution, resolution), Image.BILINEAR
                )
                arr = np.asarray(im, dtype=np.float32)
        except OSError as exc:
            errors.append(f"undecodable image {fpath}: {exc}")
            continue
        image = (arr / 127.5 - 1.0).transpose(2, 0, 1)
        examples.append(Example(image, caption))
    if errors:
        raise ValueError("dataset load failed:\n" + "\n".join(errors))
    return Dataset(examples, resolution)


def batches_per_epoch(n: int, batch_size: int) -> int:
    return (n + batch_size - 1) // batch_size


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([seed & (2**63 - 1), epoch]))
    )
    return rng.permutation(n)


def batch_iter(dataset: Dataset, batch_size: int, seed: int,
               epoch: int) -> Iterator[List[int]]:
    """Deterministic shuffled batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = epoch_permutation(len(dataset), seed, epoch)
    for start in range(0, len(dataset), batch_size):
        yield list(perm[start : start + batch_size])
