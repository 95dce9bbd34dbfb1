import csv
import json

import numpy as np
import pytest

from shredrec.cli import Config, bench_instance, load_config, main, query_nn
from shredrec.docproc import load_image, load_shreds, virtual_shred
from shredrec.projector import build_projector, save_weights
from shredrec.sampling import load_dataset

SMALL = ["--page-width", "400", "--page-height", "200", "--strips", "8", "--seed", "3"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--count", "3", "--out", str(root / "pages"), *SMALL]) == 0
    save_weights(build_projector(d=4, seed=1), root / "model.shrw")
    return root


def test_config_precedence(tmp_path, monkeypatch):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"d": 16, "epochs": 7}))
    cfg = load_config(path, {"d": 8, "lr": None})
    assert (cfg.d, cfg.epochs, cfg.lr) == (8, 7, 0.1)
    monkeypatch.setenv("SHREDREC_SEED", "11")
    assert load_config(path).seed == 11
    assert load_config(path, {"seed": 2}).seed == 2
    path.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ValueError):
        load_config(path)


@pytest.mark.parametrize("bad", [{"s": 30}, {"strips": 1}, {"blank_ratio": 1.5}, {"delta_max": -1},
                                 {"neg_rows": "x"}, {"loss_label_convention": "x"}])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        Config(**bad).validate()


def test_synth_pages(workspace):
    pages = sorted((workspace / "pages").glob("*.png"))
    assert len(pages) == 3
    manifest = json.loads((workspace / "pages" / "corpus.json").read_text())
    assert manifest["count"] == 3
    for p in pages:
        img = load_image(p)
        assert img.shape == (200, 400)
        assert (img < 128).mean() > 0.05


def test_synth_deterministic(tmp_path, workspace):
    main(["synth", "--count", "1", "--out", str(tmp_path), *SMALL])
    assert (tmp_path / "page_0000.png").read_bytes() == (workspace / "pages" / "page_0000.png").read_bytes()


def test_shred_and_extract(tmp_path, workspace):
    assert main(["shred", "--pages", str(workspace / "pages"), "--out", str(tmp_path / "s"), *SMALL]) == 0
    shreds = load_shreds(tmp_path / "s" / "page_0000")
    assert len(shreds) == 8 and shreds[0].width == 50
    out = tmp_path / "pairs.shrd"
    assert main(["extract", "--pages", str(workspace / "pages"), "--out", str(out), "--max-pos", "50", *SMALL]) == 0
    ds = load_dataset(out)
    assert len(set(ds.docs)) == 3 and ds.y.sum() >= len(ds) / 2


def test_train_and_resume(tmp_path, workspace):
    data = tmp_path / "pairs.shrd"
    main(["extract", "--pages", str(workspace / "pages"), "--out", str(data), "--max-pos", "40", *SMALL])
    common = ["--d", "4", "--batch", "32", "--val-docs", "1", *SMALL]
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "t"), "--epochs", "2", *common]) == 0
    out = tmp_path / "t"
    assert (out / "best.shrw").exists() and (out / "checkpoints" / "epoch_002.shrw").exists()
    log = list(csv.DictReader((out / "training_log.csv").open()))
    assert [r["epoch"] for r in log] == ["0", "1", "2"]
    report = json.loads((out / "train_report.json").read_text())
    assert report["config"]["d"] == 4
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "r"), "--epochs", "3",
                 "--resume", str(out / "checkpoints" / "epoch_002.shrw"), "--start-epoch", "2", *common]) == 0
    assert (tmp_path / "r" / "checkpoints" / "epoch_003.shrw").exists()


def test_reconstruct_single_page(tmp_path, workspace):
    out = tmp_path / "rec"
    page = workspace / "pages" / "page_0000.png"
    assert main(["reconstruct", "--model", str(workspace / "model.shrw"), "--pages", str(page),
                 "--permute-seed", "1", "--out", str(out), "--render", *SMALL]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["n"] == 8 and report["inference_count"] == 16
    assert 0 <= report["accuracy"] <= 1
    assert report["stage_inferences"]["pw"] == 0
    solution = json.loads((out / "solution.json").read_text())
    assert sorted(solution["order"]) == list(range(8))
    assert (out / "cost_matrix.csv").read_text().startswith("8\n")
    assert load_image(out / "render.png").shape == (200, 400)
    assert not list(out.glob("*.partial"))


def test_reconstruct_mix_needs_flag(tmp_path, workspace, capsys):
    args = ["reconstruct", "--model", str(workspace / "model.shrw"), "--pages", str(workspace / "pages"),
            "--out", str(tmp_path / "m"), *SMALL]
    assert main(args) == 2
    assert "--mix" in capsys.readouterr().err
    assert main(args + ["--mix", "--render"]) == 0
    report = json.loads((tmp_path / "m" / "report.json").read_text())
    assert report["multi_page"] and report["n"] == 24
    assert report["relaxed_accuracy"] >= report["accuracy"]
    # a 4-pixel marker wherever the solution crosses from one page to another
    # (unpermuted, so shred i comes from page i // 8)
    order = json.loads((tmp_path / "m" / "solution.json").read_text())["order"]
    crossings = sum(a // 8 != b // 8 for a, b in zip(order[:-1], order[1:]))
    assert crossings >= 2
    assert load_image(tmp_path / "m" / "render.png").shape == (200, 24 * 50 + 4 * crossings)


def test_embed_csv(tmp_path, workspace):
    main(["shred", "--pages", str(workspace / "pages" / "page_0001.png"), "--out", str(tmp_path / "s"), *SMALL])
    out = tmp_path / "e.csv"
    assert main(["embed", "--model", str(workspace / "model.shrw"), "--shreds",
                 str(tmp_path / "s" / "page_0001"), "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["shred", "side", "row", "e0", "e1", "e2", "e3"]
    assert {r[1] for r in rows[1:]} == {"left", "right"}
    assert rows[1][0] == "page_0001:0"


def test_render_perfect_solution(tmp_path):
    page = np.random.default_rng(0).random((40, 100)) < 0.3
    from shredrec.docproc import save_shreds

    save_shreds(virtual_shred(page, 4, "p"), tmp_path / "s")
    (tmp_path / "sol.json").write_text(json.dumps({"order": [0, 1, 2, 3]}))
    assert main(["render", "--solution", str(tmp_path / "sol.json"), "--shreds", str(tmp_path / "s"),
                 "--out", str(tmp_path / "r.png")]) == 0
    np.testing.assert_array_equal(load_image(tmp_path / "r.png") < 128, page)
    (tmp_path / "bad.json").write_text(json.dumps({"order": [0, 1]}))
    assert main(["render", "--solution", str(tmp_path / "bad.json"), "--shreds", str(tmp_path / "s"),
                 "--out", str(tmp_path / "x.png")]) == 2


def test_query_nn_ranking():
    pair = build_projector(d=4)
    rng = np.random.default_rng(0)
    cands = [rng.random((32, 32)) < 0.3 for _ in range(5)]
    ranked = query_nn(pair, cands[0], "right", cands, k=10)
    assert len(ranked) == 5 and sorted(i for i, _ in ranked) == list(range(5))
    dists = [d for _, d in ranked]
    assert dists == sorted(dists)
    assert len(query_nn(pair, cands[0], "left", cands, k=2)) == 2
    with pytest.raises(ValueError):
        query_nn(pair, cands[0], "right", [], k=1)


def test_query_nn_command(tmp_path, workspace, capsys):
    from shredrec.docproc import save_png

    rng = np.random.default_rng(1)
    (tmp_path / "c").mkdir()
    for i in range(3):
        save_png(rng.random((32, 32)) < 0.3, tmp_path / "c" / f"{i}.png")
    save_png(rng.random((32, 32)) < 0.3, tmp_path / "q.png")
    assert main(["query-nn", "--model", str(workspace / "model.shrw"), "--query", str(tmp_path / "q.png"),
                 "--candidates", str(tmp_path / "c"), "--k", "2", "--out", str(tmp_path / "nn.json")]) == 0
    result = json.loads((tmp_path / "nn.json").read_text())
    assert [r["rank"] for r in result["ranking"]] == [1, 2]


def test_bench_csv(tmp_path, workspace):
    out = tmp_path / "b.csv"
    assert main(["bench", "--model", str(workspace / "model.shrw"), "--sizes", "8,16",
                 "--pages", str(workspace / "pages"), "--out", str(out), *SMALL]) == 0
    rows = list(csv.DictReader(out.open()))
    assert list(rows[0]) == ["n", "pro_s", "pw_s", "opt_s", "inferences", "accuracy"]
    assert [(int(r["n"]), int(r["inferences"])) for r in rows] == [(8, 16), (16, 32)]


def test_bench_sweep(tmp_path, workspace):
    out = tmp_path / "sweep.csv"
    assert main(["bench", "--sweep", "d=2,4", "--train-pages", str(workspace / "pages"), "--sizes", "8",
                 "--pages", str(workspace / "pages"), "--epochs", "1", "--max-pos", "20", "--val-docs", "1",
                 "--out", str(out), *SMALL]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["d"] for r in rows] == ["2", "4"]


def test_bench_instance_too_small():
    pages = [virtual_shred(np.zeros((40, 80), bool), 4, "a")]
    assert bench_instance(pages, 3, 0).n == 3
    with pytest.raises(ValueError):
        bench_instance(pages, 5, 0)


def test_bad_input_exit_code(tmp_path, capsys):
    assert main(["extract", "--pages", str(tmp_path / "missing.png"), "--out", str(tmp_path / "x")]) == 2
    assert "error" in capsys.readouterr().err
