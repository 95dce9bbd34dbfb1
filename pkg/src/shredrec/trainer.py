"""Joint SGD training of the two projection networks with SMD model selection."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .projector import ProjectorPair, build_projector, embed_sample, load_weights, save_weights
from .sampling import SampleDataset, derive_seed
from .tensornet import NonFiniteError, contrastive_loss, named_gradients, sgd_step

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 0.1
    batch: int = 256
    margin: float = 1.0
    seed: int = 0
    d: int = 128
    s_y: int = 32
    s_x: int = 32
    loss_convention: str = "intent"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.margin <= 0:
            raise ValueError("margin must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    smd: float
    checkpoint_path: str = ""


def smd(dist_pos, dist_neg) -> float:
    """Standardized mean difference ``(mean(neg) - mean(pos)) / pooled_std``.

    Larger is better.  With zero pooled spread the result is ``+inf`` when
    the negatives sit strictly further out, ``0`` for equal means, and an
    error otherwise.
    """
    pos = np.asarray(dist_pos, dtype=np.float64)
    neg = np.asarray(dist_neg, dtype=np.float64)
    if pos.size < 2 or neg.size < 2:
        raise ValueError("SMD needs at least two distances per label")
    n_p, n_n = pos.size, neg.size
    pooled = ((n_p - 1) * pos.var(ddof=1) + (n_n - 1) * neg.var(ddof=1)) / (n_p + n_n - 2)
    diff = neg.mean() - pos.mean()
    if pooled == 0:
        if diff > 0:
            return math.inf
        if diff == 0:
            return 0.0
        raise ValueError("degenerate SMD: zero spread with positives further than negatives")
    return float(diff / math.sqrt(pooled))


def _as_float(X: np.ndarray) -> np.ndarray:
    return X.astype(np.float32)[..., None]


def validate_distances(pair: ProjectorPair, val: SampleDataset, batch: int = 1024):
    """``||f_left(x_l) - f_right(x_r)||`` per validation pair, split by label."""
    if len(val) == 0:
        raise ValueError("empty validation set")
    dists = np.empty(len(val), dtype=np.float64)
    for start in range(0, len(val), batch):
        chunk = val.X[start : start + batch]
        e_r = embed_sample(pair, "right", chunk[:, 0]).reshape(len(chunk), -1).astype(np.float64)
        e_l = embed_sample(pair, "left", chunk[:, 1]).reshape(len(chunk), -1).astype(np.float64)
        dists[start : start + len(chunk)] = np.sqrt(((e_l - e_r) ** 2).sum(axis=1))
    positive = val.y == 1
    return dists[positive].tolist(), dists[~positive].tolist()


def validation_smd(pair: ProjectorPair, val: SampleDataset) -> float:
    pos, neg = validate_distances(pair, val)
    return smd(pos, neg)


def train_step(pair: ProjectorPair, X: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """One SGD update on a mini-batch; returns per-sample losses."""
    for net in (pair.f_left, pair.f_right):
        net.zero_grad()
    e_r = pair.f_right.forward(_as_float(X[:, 0]))
    e_l = pair.f_left.forward(_as_float(X[:, 1]))
    _, per_sample, g_l, g_r = contrastive_loss(e_l, e_r, y, cfg.margin, cfg.loss_convention)
    pair.f_left.backward(g_l)
    pair.f_right.backward(g_r)
    params = pair.parameters()
    grads = [g for _, g in named_gradients(pair.f_left)] + [g for _, g in named_gradients(pair.f_right)]
    sgd_step(params, grads, cfg.lr)
    return per_sample


def run_epoch(pair: ProjectorPair, data: SampleDataset, cfg: TrainConfig, epoch: int) -> float:
    """Shuffle with the epoch's derived seed, then sweep all mini-batches (last one partial)."""
    order = np.random.default_rng(derive_seed(cfg.seed, epoch)).permutation(len(data))
    total = 0.0
    for start in range(0, len(order), cfg.batch):
        idx = order[start : start + cfg.batch]
        total += float(train_step(pair, data.X[idx], data.y[idx], cfg).sum())
    return total / len(order)


def _snapshot(pair: ProjectorPair) -> list[np.ndarray]:
    return [p.copy() for p in pair.parameters()]


def _restore(pair: ProjectorPair, snap) -> None:
    for p, saved in zip(pair.parameters(), snap):
        p[...] = saved


def train(train_ds: SampleDataset, val_ds: SampleDataset, cfg: TrainConfig,
          checkpoint_dir=None, pair: ProjectorPair | None = None, start_epoch: int = 0,
          log_path=None):
    """Train for epochs ``start_epoch + 1 .. cfg.epochs``.

    Epoch 0 denotes the starting weights (scored but not trained).  After
    each epoch the weights are checkpointed (when ``checkpoint_dir`` is
    given) and scored by validation SMD.  Returns ``(best_pair, records)``
    where ``best_pair`` holds the weights of the highest-SMD epoch (earliest
    on ties).  Passing ``pair`` and ``start_epoch`` resumes a run.
    """
    if len(train_ds) == 0:
        raise ValueError("empty training set")
    if len(val_ds) == 0 or len(set(val_ds.y.tolist())) < 2:
        raise ValueError("validation set needs both positive and negative pairs")
    if pair is None:
        pair = build_projector(cfg.d, cfg.s_x, cfg.seed, s_y=cfg.s_y)
    if (pair.d, pair.s_y, pair.s_x) != (cfg.d, cfg.s_y, cfg.s_x):
        raise ValueError("projector geometry does not match the training config")
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    def checkpoint(epoch: int) -> str:
        if checkpoint_dir is None:
            return ""
        path = checkpoint_dir / f"epoch_{epoch:03d}.shrw"
        save_weights(pair, path)
        return str(path)

    records = []
    last_ckpt = checkpoint(start_epoch)
    records.append(EpochRecord(start_epoch, math.nan, validation_smd(pair, val_ds), last_ckpt))
    best_smd, best_snap, best_epoch = records[0].smd, _snapshot(pair), start_epoch
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        try:
            loss = run_epoch(pair, train_ds, cfg, epoch)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}", last_ckpt) from exc
        last_ckpt = checkpoint(epoch)
        score = validation_smd(pair, val_ds)
        records.append(EpochRecord(epoch, loss, score, last_ckpt))
        log.info("epoch %d loss %.5f smd %.4f", epoch, loss, score)
        if score > best_smd:
            best_smd, best_snap, best_epoch = score, _snapshot(pair), epoch
    if log_path is not None:
        write_training_log(records, log_path)
    final = _snapshot(pair)
    best = build_projector(cfg.d, cfg.s_x, cfg.seed, s_y=cfg.s_y, row_padding=pair.row_padding)
    _restore(best, best_snap)
    _restore(pair, final)
    log.info("best epoch %d (smd %.4f)", best_epoch, best_smd)
    return best, records


def best_record(records) -> EpochRecord:
    """Highest SMD, earliest epoch on ties."""
    best = records[0]
    for rec in records[1:]:
        if rec.smd > best.smd:
            best = rec
    return best


def write_training_log(records, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    with tmp.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "smd", "checkpoint"])
        for r in records:
            writer.writerow([r.epoch, "" if math.isnan(r.train_loss) else repr(r.train_loss),
                             repr(r.smd), r.checkpoint_path])
    tmp.replace(path)


def resume(checkpoint, train_ds, val_ds, cfg: TrainConfig, start_epoch: int, **kwargs):
    """Reload ``checkpoint`` (saved after ``start_epoch``) and continue training."""
    pair = build_projector(cfg.d, cfg.s_x, cfg.seed, s_y=cfg.s_y)
    load_weights(checkpoint, pair)
    return train(train_ds, val_ds, cfg, pair=pair, start_epoch=start_epoch, **kwargs)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
