"""Synthetic text pages: pseudo-words set in Pillow's bundled font.

Pages are justified paragraphs of random letter strings (English letter
frequencies, some capitals, digits and punctuation) at a random type size
and weight, with narrow side margins so that every strip carries text.
Rendering is anti-aliased gray plus mild sensor noise, so the pages go
through the same binarization as scanned input.
"""

from __future__ import annotations

import json
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .docproc import save_png

_LETTERS = "etaoinshrdlcumwfgypbvkjxqz"
_FREQ = np.array([12.7, 9.1, 8.2, 7.5, 7.0, 6.7, 6.3, 6.1, 6.0, 4.3, 4.0, 2.8, 2.8, 2.4,
                  2.4, 2.2, 2.0, 2.0, 1.9, 1.5, 1.0, 0.8, 0.15, 0.15, 0.1, 0.07])
_FREQ = _FREQ / _FREQ.sum()
_PUNCT = ".,;:"
# 9 to 12 pt type at 300 dpi
FONT_SIZES = (36, 50)


@lru_cache(maxsize=None)
def _font(size: int):
    return ImageFont.load_default(size=size)


def _word(rng: np.random.Generator) -> str:
    length = int(min(1 + rng.geometric(0.22), 12))
    word = "".join(rng.choice(list(_LETTERS), size=length, p=_FREQ))
    roll = rng.random()
    if roll < 0.05:
        word = "".join(str(d) for d in rng.integers(0, 10, size=min(length, 4)))
    elif roll < 0.15:
        word = word.capitalize()
    elif roll < 0.17:
        word = word.upper()
    if rng.random() < 0.1:
        word += _PUNCT[rng.integers(len(_PUNCT))]
    return word


def render_page(seed: int, width: int = 2480, height: int = 1600, sizes: tuple[int, int] = FONT_SIZES) -> np.ndarray:
    """Render one grayscale page (``uint8``, white background).

    The type size in pixels is drawn from ``sizes`` (inclusive).
    """
    if not 1 <= sizes[0] <= sizes[1]:
        raise ValueError(f"font sizes must satisfy 1 <= min <= max, got {sizes}")
    rng = np.random.default_rng(seed)
    size = int(rng.integers(sizes[0], sizes[1] + 1))
    stroke = int(rng.random() < 0.3) * max(1, size // 16)
    font = _font(size)
    leading = int(round(size * rng.uniform(1.25, 1.6)))
    margin_l = int(rng.integers(2, 12))
    margin_r = int(rng.integers(2, 12))
    top = int(rng.integers(6, 24))
    img = Image.new("L", (width, height), 255)
    draw = ImageDraw.Draw(img)
    space = draw.textlength(" ", font=font)
    line_width = width - margin_l - margin_r
    ink = int(rng.integers(0, 50))

    y = top
    indent = True
    while y + leading <= height - 4:
        words, widths, used = [], [], 0.0
        x0 = margin_l + (2 * size if indent else 0)
        avail = line_width - (x0 - margin_l)
        while True:
            w = _word(rng)
            wl = draw.textlength(w, font=font) + 2 * stroke
            if used + wl + space * len(words) > avail:
                break
            words.append(w)
            widths.append(wl)
            used += wl
        end_of_paragraph = rng.random() < 0.08
        if end_of_paragraph and len(words) > 2:
            keep = int(rng.integers(1, len(words)))
            words, widths = words[:keep], widths[:keep]
            gap = space
        else:
            gap = (avail - sum(widths)) / max(len(words) - 1, 1)
        x = float(x0)
        for w, wl in zip(words, widths):
            draw.text((x, y), w, font=font, fill=ink, stroke_width=stroke, stroke_fill=ink)
            x += wl + gap
        indent = end_of_paragraph
        y += leading + (leading // 2 if end_of_paragraph else 0)

    arr = np.asarray(img, dtype=np.float64)
    arr += rng.normal(0.0, 6.0, size=arr.shape)
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def write_corpus(out_dir, count: int, seed: int = 0, width: int = 2480, height: int = 1600,
                 sizes: tuple[int, int] = FONT_SIZES) -> list[Path]:
    """Render ``count`` pages as PNG files plus a ``corpus.json`` manifest."""
    from .sampling import derive_seed

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths, entries = [], []
    for i in range(count):
        page_seed = derive_seed(seed, i)
        path = out_dir / f"page_{i:04d}.png"
        save_png(render_page(page_seed, width, height, sizes), path)
        paths.append(path)
        entries.append({"file": path.name, "page_id": path.stem, "seed": page_seed})
    manifest = {"count": count, "seed": seed, "width": width, "height": height,
                "font_sizes": list(sizes), "pages": entries}
    tmp = out_dir / "corpus.json.partial"
    tmp.write_text(json.dumps(manifest, indent=1))
    tmp.replace(out_dir / "corpus.json")
    return paths
