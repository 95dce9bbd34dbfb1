"""Self-supervised sample pairs from virtually shredded pages.

Adjacent shreds of a page give positive pairs (label 1) for free; other
orderings of the same page give negatives (label 0).  Each pair holds the
r-sample (the ``s`` rightmost columns of the left shred) and the l-sample
(the ``s`` leftmost columns of the right shred) taken at the same rows.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


DATASET_MAGIC = b"SHRD"
DATASET_VERSION = b"1"

_MASK64 = (1 << 64) - 1
NEG_ROWS = ("independent", "shared", "mixed")


class DatasetFileError(ValueError):
    """Corrupt or incompatible dataset file."""


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, index: int) -> int:
    """Per-page seed: ``splitmix64(master + index * 0x9E3779B97F4A7C15)``."""
    return splitmix64((master + index * 0x9E3779B97F4A7C15) & _MASK64)


@dataclass(frozen=True)
class SamplePair:
    x_r: np.ndarray
    x_l: np.ndarray
    y: int
    source_doc: str
    # construction bookkeeping, not persisted: (left gt_index, right gt_index, top row of x_r, of x_l)
    origin: tuple | None = field(default=None, compare=False)


@dataclass
class SampleDataset:
    """Pairs stacked as ``X[:, 0] = x_r`` and ``X[:, 1] = x_l``."""

    X: np.ndarray
    y: np.ndarray
    docs: list
    origins: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=bool)
        self.y = np.asarray(self.y, dtype=np.uint8)
        self.docs = [str(d) for d in self.docs]
        if self.X.ndim != 4 or self.X.shape[1] != 2:
            raise ValueError(f"X must be (N, 2, s_y, s_x), got {self.X.shape}")
        if not (len(self.X) == len(self.y) == len(self.docs)):
            raise ValueError("X, y and docs must have equal length")

    @classmethod
    def empty(cls, s: int, s_y: int | None = None) -> "SampleDataset":
        s_y = s if s_y is None else s_y
        return cls(np.zeros((0, 2, s_y, s), bool), np.zeros(0, np.uint8), [])

    @classmethod
    def from_pairs(cls, pairs, s: int, s_y: int | None = None) -> "SampleDataset":
        pairs = list(pairs)
        if not pairs:
            return cls.empty(s, s_y)
        X = np.stack([np.stack([p.x_r, p.x_l]) for p in pairs])
        origins = None
        if all(p.origin is not None for p in pairs):
            origins = np.array([p.origin for p in pairs], dtype=np.int64)
        return cls(X, [p.y for p in pairs], [p.source_doc for p in pairs], origins)

    @classmethod
    def concatenate(cls, parts) -> "SampleDataset":
        parts = list(parts)
        origins = None
        if parts and all(p.origins is not None for p in parts):
            origins = np.concatenate([p.origins for p in parts])
        return cls(np.concatenate([p.X for p in parts]), np.concatenate([p.y for p in parts]),
                   [d for p in parts for d in p.docs], origins)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def s(self) -> int:
        return self.X.shape[3]

    @property
    def s_y(self) -> int:
        return self.X.shape[2]

    @property
    def pairs(self) -> list[SamplePair]:
        return [SamplePair(self.X[i, 0], self.X[i, 1], int(self.y[i]), self.docs[i])
                for i in range(len(self))]

    @property
    def stats(self) -> dict:
        out: dict = {}
        for doc, label in zip(self.docs, self.y):
            entry = out.setdefault(doc, {"positive": 0, "negative": 0})
            entry["positive" if label else "negative"] += 1
        return out

    def subset(self, mask_or_index) -> "SampleDataset":
        idx = np.arange(len(self))[mask_or_index]
        origins = None if self.origins is None else self.origins[idx]
        return SampleDataset(self.X[idx], self.y[idx], [self.docs[i] for i in idx], origins)

    def equals(self, other: "SampleDataset") -> bool:
        return (self.X.shape == other.X.shape and np.array_equal(self.X, other.X)
                and np.array_equal(self.y, other.y) and self.docs == other.docs)


def _window_ink(columns: np.ndarray, s_y: int, stride: int) -> np.ndarray:
    """Ink count of every ``s_y``-row window (top rows 0, stride, ...) of ``columns``."""
    per_row = columns.sum(axis=1, dtype=np.int64)
    csum = np.concatenate([[0], np.cumsum(per_row)])
    tops = np.arange(0, len(per_row) - s_y + 1, stride)
    return csum[tops + s_y] - csum[tops]


def extract_pairs(shreds, s: int = 32, stride: int = 2, max_pos: int = 1000,
                  blank_ratio: float = 0.8, seed: int = 0, s_y: int | None = None,
                  neg_rows: str = "independent") -> list[SamplePair]:
    """Labeled sample pairs from the shreds of one page.

    Positives: every ground-truth-adjacent pair, windows every ``stride``
    rows top to bottom, dropping pairs whose combined ``2 * s_y * s`` pixels
    are more than ``blank_ratio`` blank.  When more than ``max_pos`` survive,
    a seeded subset of ``max_pos`` is kept (in scan order).  Negatives:
    non-adjacent ordered pairs of the same page at uniformly random rows,
    same blank filter, as many as there are positives (fewer if the page
    cannot supply them).  With ``neg_rows='independent'`` the two windows of
    a negative get their own rows; ``'shared'`` crops both at one row and
    ``'mixed'`` picks one of the two rules per negative by a fair coin.
    """
    s_y = s if s_y is None else s_y
    shreds = sorted(shreds, key=lambda sh: sh.gt_index)
    if len(shreds) < 2:
        raise ValueError("need at least two shreds")
    pages = {sh.page_id for sh in shreds}
    if len(pages) != 1:
        raise ValueError(f"shreds come from several pages: {sorted(pages)}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if neg_rows not in NEG_ROWS:
        raise ValueError(f"neg_rows must be one of {NEG_ROWS}, got {neg_rows!r}")
    height = shreds[0].height
    if any(sh.height != height for sh in shreds) or height < s_y:
        raise ValueError("shreds must share a height of at least s_y")
    if any(sh.width < s for sh in shreds):
        raise ValueError(f"every shred must be at least {s} pixels wide")
    doc = shreds[0].page_id
    rng = np.random.default_rng(seed)
    max_ink_blank = 2 * s_y * s
    min_ink = max_ink_blank * (1.0 - blank_ratio)

    rights = [sh.image[:, sh.width - s :] for sh in shreds]
    lefts = [sh.image[:, :s] for sh in shreds]

    candidates = []
    for j in range(len(shreds) - 1):
        ink = _window_ink(rights[j], s_y, stride) + _window_ink(lefts[j + 1], s_y, stride)
        for t in np.flatnonzero(ink >= min_ink - 1e-9):
            candidates.append((j, int(t) * stride))
    if len(candidates) > max_pos:
        keep = np.sort(rng.choice(len(candidates), size=max_pos, replace=False))
        candidates = [candidates[i] for i in keep]

    pairs = []
    for j, top in candidates:
        pairs.append(SamplePair(rights[j][top : top + s_y].copy(), lefts[j + 1][top : top + s_y].copy(),
                                1, doc, (shreds[j].gt_index, shreds[j + 1].gt_index, top, top)))

    n = len(shreds)
    orderings = [(a, b) for a in range(n) for b in range(n) if a != b and b != a + 1]
    want = len(pairs)
    budget = 50 * want + 100
    negatives = 0
    while negatives < want and budget > 0 and orderings:
        budget -= 1
        a, b = orderings[rng.integers(len(orderings))]
        top = int(rng.integers(0, height - s_y + 1))
        top_l = top
        if neg_rows == "independent" or (neg_rows == "mixed" and rng.random() < 0.5):
            top_l = int(rng.integers(0, height - s_y + 1))
        xr = rights[a][top : top + s_y]
        xl = lefts[b][top_l : top_l + s_y]
        if int(xr.sum()) + int(xl.sum()) < min_ink - 1e-9:
            continue
        pairs.append(SamplePair(xr.copy(), xl.copy(), 0, doc,
                                (shreds[a].gt_index, shreds[b].gt_index, top, top_l)))
        negatives += 1
    return pairs


def blank_fraction(x_r: np.ndarray, x_l: np.ndarray) -> float:
    return 1.0 - (int(x_r.sum()) + int(x_l.sum())) / (x_r.size + x_l.size)


def apply_shredding_noise(pair: SamplePair, cols: int = 2, p: float = 0.2, seed: int = 0) -> SamplePair:
    """Salt-and-pepper on the cut edge: the last ``cols`` columns of ``x_r``
    and the first ``cols`` of ``x_l``.  Each affected pixel is, with
    probability ``p``, replaced by a fair coin flip."""
    X = np.stack([pair.x_r, pair.x_l])[None]
    noisy = _noise_stack(X, cols, p, np.random.default_rng(seed))[0]
    return SamplePair(noisy[0], noisy[1], pair.y, pair.source_doc, pair.origin)


def _noise_stack(X: np.ndarray, cols: int, p: float, rng: np.random.Generator) -> np.ndarray:
    if not 0 <= p <= 1:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    s = X.shape[3]
    if not 0 <= cols <= s:
        raise ValueError(f"cols must lie in [0, {s}], got {cols}")
    X = X.copy()
    if cols == 0:
        return X
    n, _, s_y, _ = X.shape
    hit = rng.random((n, 2, s_y, cols)) < p
    coin = rng.random((n, 2, s_y, cols)) < 0.5
    edge_r = X[:, 0, :, s - cols :]
    edge_l = X[:, 1, :, :cols]
    X[:, 0, :, s - cols :] = np.where(hit[:, 0], coin[:, 0], edge_r)
    X[:, 1, :, :cols] = np.where(hit[:, 1], coin[:, 1], edge_l)
    return X


def apply_dataset_noise(ds: SampleDataset, cols: int = 2, p: float = 0.2, seed: int = 0) -> SampleDataset:
    """Vectorized :func:`apply_shredding_noise` over a whole dataset."""
    X = _noise_stack(ds.X, cols, p, np.random.default_rng(seed))
    return SampleDataset(X, ds.y.copy(), list(ds.docs), ds.origins)


def split_train_val(ds: SampleDataset, val_docs: int, seed: int = 0):
    """Document-level split: all pairs of ``val_docs`` random documents go to validation."""
    docs = sorted(set(ds.docs))
    if val_docs < 0 or (val_docs and val_docs >= len(docs)):
        raise ValueError(f"cannot hold out {val_docs} of {len(docs)} documents")
    if val_docs == 0:
        return ds, ds.subset(np.zeros(len(ds), bool))
    chosen = set(np.random.default_rng(seed).choice(docs, size=val_docs, replace=False).tolist())
    mask = np.array([d in chosen for d in ds.docs], dtype=bool)
    return ds.subset(~mask), ds.subset(mask)


# -- SHRD1 files -------------------------------------------------------------
#
# "SHRD1" | u32 s | u32 count | count x (u32 doc_len | doc utf-8 | u8 y |
# x_r bits | x_l bits).  Rasters are row-major, packed MSB-first, each padded
# to a whole byte.  All integers little-endian.

_HEAD = struct.Struct("<II")
_DOCLEN = struct.Struct("<I")


def save_dataset(ds: SampleDataset, path) -> None:
    if ds.s_y != ds.s:
        raise ValueError("the dataset file format stores square samples only")
    s = ds.s
    chunks = [DATASET_MAGIC + DATASET_VERSION, _HEAD.pack(s, len(ds))]
    for i in range(len(ds)):
        doc = ds.docs[i].encode("utf-8")
        chunks.append(_DOCLEN.pack(len(doc)))
        chunks.append(doc)
        chunks.append(bytes([int(ds.y[i])]))
        chunks.append(np.packbits(ds.X[i, 0].reshape(-1)).tobytes())
        chunks.append(np.packbits(ds.X[i, 1].reshape(-1)).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_dataset(path) -> SampleDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise DatasetFileError(f"{path}: bad magic bytes")
    if raw[4:5] != DATASET_VERSION:
        raise DatasetFileError(f"{path}: version mismatch ({raw[4:5]!r} != {DATASET_VERSION!r})")
    try:
        s, count = _HEAD.unpack_from(raw, 5)
        offset = 5 + _HEAD.size
        nbytes = (s * s + 7) // 8
        X = np.zeros((count, 2, s, s), dtype=bool)
        y = np.zeros(count, dtype=np.uint8)
        docs = []
        for i in range(count):
            (doc_len,) = _DOCLEN.unpack_from(raw, offset)
            offset += _DOCLEN.size
            docs.append(raw[offset : offset + doc_len].decode("utf-8"))
            offset += doc_len
            y[i] = raw[offset]
            offset += 1
            for k in range(2):
                chunk = np.frombuffer(raw, dtype=np.uint8, count=nbytes, offset=offset)
                X[i, k] = np.unpackbits(chunk)[: s * s].reshape(s, s).astype(bool)
                offset += nbytes
    except (struct.error, ValueError, IndexError, UnicodeDecodeError) as exc:
        raise DatasetFileError(f"{path}: corrupt dataset file: {exc}") from exc
    if offset != len(raw):
        raise DatasetFileError(f"{path}: trailing bytes")
    if y.size and y.max() > 1:
        raise DatasetFileError(f"{path}: labels must be 0/1")
    return SampleDataset(X, y, docs)


def extract_corpus(pages, s: int = 32, stride: int = 2, max_pos: int = 1000,
                   blank_ratio: float = 0.8, noise_cols: int = 2, noise_p: float = 0.2,
                   seed: int = 0, s_y: int | None = None, neg_rows: str = "independent") -> SampleDataset:
    """Extract and noise pairs from many pages; ``pages`` is a list of shred lists.

    Page ``i`` draws from ``derive_seed(seed, i)`` so the result does not
    depend on how pages are scheduled.
    """
    parts = []
    s_y_ = s if s_y is None else s_y
    for i, shreds in enumerate(pages):
        page_seed = derive_seed(seed, i)
        pairs = extract_pairs(shreds, s, stride, max_pos, blank_ratio, page_seed, s_y=s_y, neg_rows=neg_rows)
        ds = SampleDataset.from_pairs(pairs, s, s_y_)
        if len(ds) and noise_p > 0:
            ds = apply_dataset_noise(ds, noise_cols, noise_p, derive_seed(page_seed, 1))
        parts.append(ds)
    if not parts:
        return SampleDataset.empty(s, s_y)
    return SampleDataset.concatenate(parts)
