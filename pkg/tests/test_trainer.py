import math

import numpy as np
import pytest

from shredrec.projector import build_projector, embed_sample
from shredrec.sampling import split_train_val
from shredrec.trainer import (
    EpochRecord, TrainConfig, best_record, resume, smd, train, validate_distances,
    validation_smd, write_training_log,
)

from oracles import smd_direct
from toy import toy_dataset


def test_smd_examples():
    assert smd([1, 1], [3, 3]) == math.inf
    assert smd([0, 2], [4, 6]) == pytest.approx(2.828427, abs=1e-6)
    assert smd([1, 2, 3], [1, 2, 3]) == 0.0
    with pytest.raises(ValueError):
        smd([3, 3], [1, 1])
    with pytest.raises(ValueError):
        smd([1], [2, 3])


def test_smd_matches_direct_formula():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pos, neg = rng.random(int(rng.integers(2, 30))), rng.random(int(rng.integers(2, 30))) + 0.3
        assert smd(pos, neg) == pytest.approx(smd_direct(pos, neg), rel=1e-12)


def test_config_validation():
    for bad in ({"epochs": 0}, {"batch": 0}, {"lr": -1.0}, {"margin": 0.0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_validate_distances_partition_and_bound():
    ds = toy_dataset(1, 10)
    pair = build_projector(d=8, seed=1)
    pos, neg = validate_distances(pair, ds)
    assert len(pos) + len(neg) == len(ds)
    assert all(0 <= v <= math.sqrt(8) for v in pos + neg)
    # per-sample redundancy check
    e_r = embed_sample(pair, "right", ds.X[0, 0]).astype(np.float64)
    e_l = embed_sample(pair, "left", ds.X[0, 1]).astype(np.float64)
    assert pos[0] == pytest.approx(float(np.linalg.norm(e_l - e_r)), rel=1e-6)


def split(seed=0):
    return split_train_val(toy_dataset(4, 24, seed=seed), 1, seed=seed)


def test_lr_zero_keeps_parameters():
    tr, va = split()
    cfg = TrainConfig(epochs=1, lr=0.0, batch=16, d=8, seed=2)
    init = build_projector(8, 32, 2)
    best, records = train(tr, va, cfg)
    for a, b in zip(init.parameters(), best.parameters()):
        assert a.tobytes() == b.tobytes()
    assert records[1].smd == records[0].smd == validation_smd(init, va)


def test_toy_training_improves_smd(tmp_path):
    tr, va = split()
    cfg = TrainConfig(epochs=5, lr=0.1, batch=16, d=8, seed=0)
    best, records = train(tr, va, cfg, checkpoint_dir=tmp_path, log_path=tmp_path / "log.csv")
    assert [r.epoch for r in records] == list(range(6))
    top = best_record(records)
    assert top.smd > records[0].smd
    assert top.smd == max(r.smd for r in records)
    assert validation_smd(best, va) == top.smd
    assert (tmp_path / "epoch_005.shrw").exists()
    assert (tmp_path / "log.csv").read_text().startswith("epoch,train_loss,smd,checkpoint")


def test_training_is_deterministic():
    tr, va = split()
    cfg = TrainConfig(epochs=2, lr=0.1, batch=16, d=4, seed=3)
    a, ra = train(tr, va, cfg)
    b, rb = train(tr, va, cfg)
    assert [(r.train_loss, r.smd) for r in ra] == [(r.train_loss, r.smd) for r in rb]
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.parameters(), b.parameters()))


def test_resume_matches_uninterrupted(tmp_path):
    tr, va = split()
    cfg = TrainConfig(epochs=4, lr=0.1, batch=16, d=4, seed=5)
    full_dir, part_dir = tmp_path / "full", tmp_path / "part"
    _, full = train(tr, va, cfg, checkpoint_dir=full_dir)
    _, first = train(tr, va, TrainConfig(**{**cfg.__dict__, "epochs": 2}), checkpoint_dir=part_dir)
    _, second = resume(part_dir / "epoch_002.shrw", tr, va, cfg, 2, checkpoint_dir=part_dir)
    assert [r.smd for r in first] + [r.smd for r in second[1:]] == [r.smd for r in full]
    assert (full_dir / "epoch_004.shrw").read_bytes() == (part_dir / "epoch_004.shrw").read_bytes()


def test_best_record_ties_pick_earliest():
    recs = [EpochRecord(0, math.nan, 1.0), EpochRecord(1, 0.5, 2.0), EpochRecord(2, 0.4, 2.0)]
    assert best_record(recs).epoch == 1


def test_train_preconditions():
    tr, va = split()
    cfg = TrainConfig(epochs=1, d=4)
    with pytest.raises(ValueError):
        train(tr.subset(np.zeros(len(tr), bool)), va, cfg)
    with pytest.raises(ValueError):
        train(tr, va.subset(va.y == 1), cfg)


def test_training_log_blank_initial_loss(tmp_path):
    write_training_log([EpochRecord(0, math.nan, 0.5, "a"), EpochRecord(1, 0.25, 0.75, "b")], tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[1] == "0,,0.5,a" and lines[2] == "1,0.25,0.75,b"
