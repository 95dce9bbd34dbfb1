"""Page ingestion, Sauvola binarization, virtual shredding and boundary crops.

Images are numpy arrays: grayscale pages are ``uint8`` of shape ``(height,
width)`` with 0 = black and 255 = white; binary images are ``bool`` with
``True`` marking ink.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from ._validation import check_binary_image, check_gray_image

# BT.601 luma, integer form: (299 R + 587 G + 114 B) / 1000
_LUMA = np.array([299, 587, 114], dtype=np.int64)


class ImageReadError(OSError):
    """Raised when an image file cannot be decoded."""


def load_image(path) -> np.ndarray:
    """Decode a PNG or PGM file into a ``uint8`` grayscale array.

    Color images are reduced with integer BT.601 weights (rounded).
    """
    path = Path(path)
    if path.suffix.lower() not in (".png", ".pgm"):
        raise ImageReadError(f"unsupported format: {path.suffix or '(none)'}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "1"):
                return np.asarray(im.convert("L"), dtype=np.uint8).copy()
            if im.mode in ("I", "I;16", "I;16B"):
                # 16-bit PGM: rescale to 8 bits
                arr = np.asarray(im, dtype=np.int64)
                maxval = max(int(im.info.get("maxval", 65535)), 1)
                return (arr * 255 // maxval).astype(np.uint8)
            rgb = np.asarray(im.convert("RGB"), dtype=np.int64)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageReadError(f"unreadable file: {path}: {exc}") from exc
    return ((rgb @ _LUMA + 500) // 1000).astype(np.uint8)


def save_png(img: np.ndarray, path) -> None:
    """Write a grayscale (``uint8``) or binary (``bool``, ink black) image."""
    img = np.asarray(img)
    if img.dtype == bool:
        img = np.where(img, 0, 255).astype(np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    Image.fromarray(img, mode="L").save(tmp, format="PNG")
    tmp.replace(path)


def _integral(a: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + 1, a.shape[1] + 1), dtype=a.dtype)
    np.cumsum(np.cumsum(a, axis=0), axis=1, out=out[1:, 1:])
    return out


def sauvola_binarize(img: np.ndarray, window: int = 33, k: float = 0.2, r: float = 128.0) -> np.ndarray:
    """Sauvola local thresholding via integral images.

    Threshold ``T = mean * (1 + k * (std / r - 1))`` over a ``window`` x
    ``window`` neighborhood clipped to the image; a pixel is ink iff its
    intensity is below ``T``.  Window sums are exact (int64), so the result
    equals a direct per-window evaluation.
    """
    img = check_gray_image(img)
    h, w = img.shape
    if window % 2 == 0 or window < 3 or window > 2 * min(h, w) - 1:
        raise ValueError(f"window must be odd and in [3, {2 * min(h, w) - 1}], got {window}")
    if not 0 < k < 1:
        raise ValueError(f"k must lie in (0, 1), got {k}")
    if r <= 0:
        raise ValueError(f"r must be positive, got {r}")

    a = img.astype(np.int64)
    s1 = _integral(a)
    s2 = _integral(a * a)
    half = window // 2
    rows = np.arange(h)
    cols = np.arange(w)
    r0 = np.clip(rows - half, 0, h)[:, None]
    r1 = np.clip(rows + half + 1, 0, h)[:, None]
    c0 = np.clip(cols - half, 0, w)[None, :]
    c1 = np.clip(cols + half + 1, 0, w)[None, :]
    count = (r1 - r0) * (c1 - c0)
    total = s1[r1, c1] - s1[r0, c1] - s1[r1, c0] + s1[r0, c0]
    total_sq = s2[r1, c1] - s2[r0, c1] - s2[r1, c0] + s2[r0, c0]
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    threshold = mean * (1.0 + k * (np.sqrt(var) / r - 1.0))
    return a < threshold


@dataclass(frozen=True)
class Shred:
    """A vertical strip with its ground-truth position (used only for scoring)."""

    image: np.ndarray
    page_id: str
    gt_index: int
    is_page_first: bool = False
    is_page_last: bool = False

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def key(self) -> tuple[str, int]:
        return (self.page_id, self.gt_index)


@dataclass(frozen=True)
class ReconstructionInstance:
    shreds: tuple
    multi_page: bool = False

    def __post_init__(self):
        object.__setattr__(self, "shreds", tuple(self.shreds))
        if len(self.shreds) < 2:
            raise ValueError("an instance needs at least two shreds")
        keys = [s.key for s in self.shreds]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (page_id, gt_index) in instance")

    @property
    def n(self) -> int:
        return len(self.shreds)


def virtual_shred(img: np.ndarray, strips: int, page_id: str = "page") -> list[Shred]:
    """Cut a page into ``strips`` equal-width shreds, dropping surplus right columns."""
    img = np.asarray(img)
    if strips < 2:
        raise ValueError(f"strips must be >= 2, got {strips}")
    if img.ndim != 2 or img.shape[1] < strips:
        raise ValueError(f"image of width {img.shape[-1]} cannot make {strips} strips")
    width = img.shape[1] // strips
    return [
        Shred(img[:, i * width : (i + 1) * width].copy(), page_id, i,
              is_page_first=i == 0, is_page_last=i == strips - 1)
        for i in range(strips)
    ]


def shred_page(gray: np.ndarray, strips: int, page_id: str, window: int = 33,
               k: float = 0.2, r: float = 128.0) -> list[Shred]:
    """Virtually shred a grayscale page, then binarize each shred on its own."""
    pieces = virtual_shred(gray, strips, page_id)
    return [replace(s, image=sauvola_binarize(s.image, window=min(window, _max_window(s.image)), k=k, r=r))
            for s in pieces]


def _max_window(img: np.ndarray) -> int:
    w = 2 * min(img.shape) - 1
    return w if w % 2 else w - 1


def boundary_crop(shred: Shred, side: str, s: int, h: int) -> np.ndarray:
    """``h x s`` vertically centered region at the shred's left or right edge."""
    img = shred.image
    if side not in ("left", "right"):
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    if img.shape[1] < s or img.shape[0] < h:
        raise ValueError(f"shred {img.shape[::-1]} too small for a {s}x{h} crop")
    top = (img.shape[0] - h) // 2
    rows = img[top : top + h]
    return rows[:, :s] if side == "left" else rows[:, img.shape[1] - s :]


def permute_instance(inst: ReconstructionInstance, seed: int) -> ReconstructionInstance:
    """Seeded shuffle of presentation order.

    The permutation is ``numpy.random.default_rng(seed).permutation(n)``;
    for example seed 0 on three shreds presents them as ``[2, 0, 1]``.
    """
    order = np.random.default_rng(seed).permutation(inst.n)
    return ReconstructionInstance([inst.shreds[i] for i in order], inst.multi_page)


def concat_shreds(shreds, seam_marker: int = 0, pages_seams: bool = False) -> np.ndarray:
    """Side-by-side concatenation, padding short shreds with white at the bottom.

    With ``pages_seams`` a ``seam_marker``-pixel ink column is inserted
    wherever consecutive shreds come from different pages.
    """
    shreds = list(shreds)
    height = max(s.height for s in shreds)
    parts = []
    for prev, cur in zip([None] + shreds[:-1], shreds):
        if pages_seams and seam_marker and prev is not None and prev.page_id != cur.page_id:
            parts.append(np.ones((height, seam_marker), dtype=bool))
        img = cur.image
        if img.shape[0] < height:
            img = np.vstack([img, np.zeros((height - img.shape[0], img.shape[1]), dtype=bool)])
        parts.append(img)
    return np.hstack(parts)


# -- shred directories -----------------------------------------------------

MANIFEST = "manifest.json"


def save_shreds(shreds, directory) -> None:
    """Write each shred as PNG plus ``manifest.json`` describing all of them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(shreds):
        name = f"{i:05d}.png"
        save_png(check_binary_image(s.image), directory / name)
        entries.append({"file": name, "page_id": s.page_id, "gt_index": s.gt_index,
                        "is_page_first": s.is_page_first, "is_page_last": s.is_page_last,
                        "width": s.width, "height": s.height})
    tmp = directory / (MANIFEST + ".partial")
    tmp.write_text(json.dumps({"shreds": entries}, indent=1))
    tmp.replace(directory / MANIFEST)


def load_shreds(directory) -> list[Shred]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    shreds = []
    for e in manifest["shreds"]:
        img = load_image(directory / e["file"]) < 128
        if img.shape != (e["height"], e["width"]):
            raise ValueError(f"{e['file']}: dimensions disagree with manifest")
        shreds.append(Shred(img, str(e["page_id"]), int(e["gt_index"]),
                            bool(e["is_page_first"]), bool(e["is_page_last"])))
    return shreds
