"""Asymmetric pair of fully-convolutional projection networks.

``f_left`` embeds left-boundary patches (``x_l``) and ``f_right`` embeds
right-boundary patches (``x_r``).  Both share one architecture but never
share weights.  Running either network on a tall ``h x s`` boundary crop
yields one embedding per stride-4 window in a single pass.
"""

from __future__ import annotations

import hashlib
import json
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensornet import (Conv2D, Fire, MaxPool2D, ReLU, Sequential, Sigmoid,
                        cast_parameters, named_parameters, output_size)

WEIGHTS_MAGIC = b"SHRW1"
DOWNSAMPLE = 4


class WeightFileError(ValueError):
    """Corrupt weight file or architecture mismatch."""


class InferenceCounter:
    """Thread-safe tally of forward passes per side."""

    def __init__(self):
        self._lock = threading.Lock()
        self._counts = {"left": 0, "right": 0}

    def add(self, side: str, k: int = 1) -> None:
        with self._lock:
            self._counts[side] += k

    def snapshot(self) -> dict:
        with self._lock:
            snap = dict(self._counts)
        snap["total"] = snap["left"] + snap["right"]
        return snap

    def reset(self) -> None:
        with self._lock:
            self._counts = {"left": 0, "right": 0}


#: Module-level counter bumped by :func:`embed_sample` / :func:`embed_boundary`.
INFERENCES = InferenceCounter()


def count_inferences() -> dict:
    """Snapshot of the global inference counter: ``{'left', 'right', 'total'}``."""
    return INFERENCES.snapshot()


def reset_inferences() -> None:
    INFERENCES.reset()


def base_output_size(s_y: int, s_x: int, row_padding: str = "valid") -> tuple[int, int]:
    h, w = output_size((s_y, s_x), 3, 2, (row_padding, "same"))
    h, w = output_size((h, w), 3, 2, (row_padding, "same"))
    if row_padding == "valid":
        h -= 4  # two fire blocks, one row trimmed at each end per block
    return h, w


def build_network(d: int, s_y: int, s_x: int, rng: np.random.Generator,
                  row_padding: str = "valid") -> Sequential:
    """conv1 -> maxpool -> fire2 -> fire3 -> head conv + sigmoid."""
    kh, kw = base_output_size(s_y, s_x, row_padding)
    if kh < 1 or kw < 1:
        raise ValueError(f"sample {s_y}x{s_x} too small for the base network")
    pad = (row_padding, "same")
    conv1 = Conv2D(1, 64, 3, 2, pad, rng=rng)
    conv1.input_grad = False
    return Sequential([
        conv1, ReLU(),
        MaxPool2D(3, 2, pad),
        Fire(64, 16, 64, row_padding, rng=rng),
        Fire(128, 16, 64, row_padding, rng=rng),
        Conv2D(128, d, (kh, kw), 1, "valid", rng=rng), Sigmoid(),
    ])


@dataclass
class ProjectorPair:
    f_left: Sequential
    f_right: Sequential
    d: int
    s_y: int
    s_x: int
    row_padding: str = "valid"
    arch_fingerprint: str = field(default="")

    def __post_init__(self):
        if not self.arch_fingerprint:
            self.arch_fingerprint = architecture_fingerprint(self.f_left)

    @property
    def s(self) -> int:
        return self.s_x

    def net(self, side: str) -> Sequential:
        if side == "left":
            return self.f_left
        if side == "right":
            return self.f_right
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")

    def parameters(self) -> list[np.ndarray]:
        return [p for _, p in named_parameters(self.f_left)] + \
               [p for _, p in named_parameters(self.f_right)]

    def astype(self, dtype) -> "ProjectorPair":
        cast_parameters(self.f_left, dtype)
        cast_parameters(self.f_right, dtype)
        return self


def architecture_fingerprint(net: Sequential) -> str:
    blob = json.dumps(net.spec(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def build_projector(d: int = 128, s: int = 32, seed: int = 0, s_y: int | None = None,
                    row_padding: str = "valid") -> ProjectorPair:
    """Build both networks from one seed (left drawn first, then right).

    ``s_y`` defaults to ``s`` (square samples); ``row_padding='same'``
    builds the all-same-padded variant, which is not window-equivalent.
    """
    s_y = s if s_y is None else s_y
    if d < 1:
        raise ValueError("d must be >= 1")
    if s % 4 or s_y % 4:
        raise ValueError(f"sample dimensions must be divisible by 4, got {s_y}x{s}")
    rng = np.random.default_rng(seed)
    left = build_network(d, s_y, s, rng, row_padding)
    right = build_network(d, s_y, s, rng, row_padding)
    return ProjectorPair(left, right, d, s_y, s, row_padding)


def _as_input(x: np.ndarray) -> np.ndarray:
    # ink (True) -> 1.0, background -> 0.0
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    return x.astype(np.float32)[..., None]


def embed_sample(pair: ProjectorPair, side: str, x: np.ndarray) -> np.ndarray:
    """Embed one ``s_y x s_x`` binary patch (or a batch ``(N, s_y, s_x)``).

    Returns ``(1, 1, d)`` for a single patch, ``(N, 1, 1, d)`` for a batch.
    """
    x = np.asarray(x)
    single = x.ndim == 2
    if x.shape[-2:] != (pair.s_y, pair.s_x):
        raise ValueError(f"expected {pair.s_y}x{pair.s_x} sample, got {x.shape[-2:]}")
    out = pair.net(side).forward(_as_input(x))
    INFERENCES.add(side, 1 if single else x.shape[0])
    return out[0] if single else out


def embedding_rows(pair: ProjectorPair, h: int) -> int:
    return h // DOWNSAMPLE - pair.s_y // DOWNSAMPLE + 1


@dataclass(frozen=True)
class EmbeddingTensor:
    data: np.ndarray  # (h', 1, d)
    side: str
    shred_ref: str = ""

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[-1]


def embed_boundary(pair: ProjectorPair, side: str, X: np.ndarray, shred_ref: str = "") -> EmbeddingTensor:
    """One forward pass over an ``h x s_x`` boundary crop.

    Row ``i`` of the result is the embedding of the window starting at pixel
    row ``4 * i``; there are ``h/4 - s_y/4 + 1`` rows.
    """
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != pair.s_x:
        raise ValueError(f"boundary crop must be h x {pair.s_x}, got {X.shape}")
    h = X.shape[0]
    if h < pair.s_y or h % DOWNSAMPLE:
        raise ValueError(f"crop height {h} must be >= {pair.s_y} and divisible by {DOWNSAMPLE}")
    out = pair.net(side).forward(_as_input(X))[0]
    INFERENCES.add(side)
    expected = embedding_rows(pair, h)
    if out.shape[:2] != (expected, 1):
        raise RuntimeError(f"unexpected embedding geometry {out.shape} (wanted {expected} rows)")
    return EmbeddingTensor(out, side, shred_ref)


# -- weight files ----------------------------------------------------------

_HEADER = struct.Struct("<IIII16s")


def save_weights(pair: ProjectorPair, path) -> None:
    """Write ``SHRW1`` + header + float32 blobs (left network, then right)."""
    path = Path(path)
    fp = pair.arch_fingerprint.encode().ljust(16, b"\0")[:16]
    pad_flag = 0 if pair.row_padding == "valid" else 1
    chunks = [WEIGHTS_MAGIC, _HEADER.pack(pair.d, pair.s_y, pair.s_x, pad_flag, fp)]
    for net in (pair.f_left, pair.f_right):
        for _, arr in named_parameters(net):
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = path.with_name(path.name + ".partial")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def read_weights_header(path) -> dict:
    raw = Path(path).read_bytes()[: len(WEIGHTS_MAGIC) + _HEADER.size]
    if len(raw) < len(WEIGHTS_MAGIC) + _HEADER.size or raw[:5] != WEIGHTS_MAGIC:
        raise WeightFileError(f"{path}: not a weight file")
    d, s_y, s_x, pad_flag, fp = _HEADER.unpack(raw[5:])
    return {"d": d, "s_y": s_y, "s_x": s_x,
            "row_padding": "valid" if pad_flag == 0 else "same",
            "fingerprint": fp.rstrip(b"\0").decode()}


def load_weights(path, pair: ProjectorPair | None = None) -> ProjectorPair:
    """Load weights into ``pair`` (verifying the fingerprint) or into a fresh pair."""
    raw = Path(path).read_bytes()
    header = read_weights_header(path)
    if pair is None:
        pair = build_projector(header["d"], header["s_x"], 0, s_y=header["s_y"],
                               row_padding=header["row_padding"])
    if header["fingerprint"] != pair.arch_fingerprint[:16]:
        raise WeightFileError(
            f"{path}: architecture fingerprint {header['fingerprint']} does not match "
            f"{pair.arch_fingerprint} (d={header['d']}, sample {header['s_y']}x{header['s_x']})")
    offset = len(WEIGHTS_MAGIC) + _HEADER.size
    for net in (pair.f_left, pair.f_right):
        for _, arr in named_parameters(net):
            nbytes = arr.size * 4
            if offset + nbytes > len(raw):
                raise WeightFileError(f"{path}: truncated weight file")
            arr[...] = np.frombuffer(raw, dtype="<f4", count=arr.size, offset=offset).reshape(arr.shape)
            offset += nbytes
    if offset != len(raw):
        raise WeightFileError(f"{path}: trailing bytes in weight file")
    return pair
