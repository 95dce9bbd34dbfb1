"""Command-line entry point: ``shredrec <command> [options]``.

Every tunable lives in :class:`Config`.  Values come from the defaults, then
an optional ``--config`` JSON file, then explicit flags.  When no seed is
given anywhere, ``SHREDREC_SEED`` supplies it.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .sampling import NEG_ROWS

log = logging.getLogger("shredrec")


@dataclass
class Config:
    # sampling
    s: int = 32
    s_y: int = 32
    strips: int = 30
    stride: int = 2
    max_pos: int = 1000
    blank_ratio: float = 0.8
    noise_cols: int = 2
    noise_p: float = 0.2
    neg_rows: str = "mixed"
    # model and training
    d: int = 128
    margin: float = 1.0
    lr: float = 0.1
    batch: int = 256
    epochs: int = 100
    val_docs: int = 10
    loss_label_convention: str = "intent"
    # reconstruction
    delta_max: int = 3
    squared: bool = True
    exact_limit: int = 20
    restarts: int = 8
    # synthetic pages
    page_width: int = 2480
    page_height: int = 1600
    font_min: int = 36
    font_max: int = 50
    seed: int = 0

    def validate(self) -> "Config":
        checks = [
            (self.s >= 4 and self.s % 4 == 0, "s must be a positive multiple of 4"),
            (self.s_y >= 4 and self.s_y % 4 == 0, "s_y must be a positive multiple of 4"),
            (self.strips >= 2, "strips must be >= 2"),
            (self.stride >= 1, "stride must be >= 1"),
            (self.max_pos >= 1, "max_pos must be >= 1"),
            (0 <= self.blank_ratio <= 1, "blank_ratio must lie in [0, 1]"),
            (0 <= self.noise_cols <= self.s, "noise_cols must lie in [0, s]"),
            (0 <= self.noise_p <= 1, "noise_p must lie in [0, 1]"),
            (self.neg_rows in NEG_ROWS, f"neg_rows must be one of {NEG_ROWS}"),
            (self.d >= 1, "d must be >= 1"),
            (self.margin > 0, "margin must be positive"),
            (self.lr >= 0, "lr must be non-negative"),
            (self.batch >= 1, "batch must be >= 1"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.val_docs >= 0, "val_docs must be >= 0"),
            (self.loss_label_convention in ("intent", "literal"),
             "loss_label_convention must be 'intent' or 'literal'"),
            (self.delta_max >= 0, "delta_max must be >= 0"),
            (2 <= self.exact_limit <= 24, "exact_limit must lie in [2, 24]"),
            (self.restarts >= 1, "restarts must be >= 1"),
            (self.page_width >= self.strips * self.s, "pages too narrow for strips of width s"),
            (self.page_height >= self.s_y, "pages shorter than s_y"),
            (1 <= self.font_min <= self.font_max, "font sizes must satisfy 1 <= font_min <= font_max"),
        ]
        for ok, message in checks:
            if not ok:
                raise ValueError(message)
        return self


CONFIG_FIELDS = {f.name: f for f in fields(Config)}


def load_config(path=None, overrides: dict | None = None) -> Config:
    cfg = Config()
    data = {}
    if path is not None:
        data = json.loads(Path(path).read_text())
        unknown = set(data) - set(CONFIG_FIELDS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
    seed_given = "seed" in data or (overrides or {}).get("seed") is not None
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if not seed_given and os.environ.get("SHREDREC_SEED"):
        data["seed"] = int(os.environ["SHREDREC_SEED"])
    return replace(cfg, **data).validate()


def _atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(text)
    tmp.replace(path)


def _write_json(path, obj) -> None:
    _atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


# -- page and shred sources --------------------------------------------------------


def _page_files(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in (".png", ".pgm")))
        else:
            out.append(p)
    if not out:
        raise ValueError("no page images found")
    return out


def _shred_pages(files, cfg: Config):
    from .docproc import load_image, shred_page

    return [shred_page(load_image(f), cfg.strips, f.stem) for f in files]


def _instance_from_args(args, cfg: Config):
    """Shreds from ``--shreds`` directories or virtually shredded ``--pages``."""
    from .docproc import ReconstructionInstance, load_shreds, permute_instance

    if args.shreds:
        shreds = [sh for d in args.shreds for sh in load_shreds(d)]
    else:
        pages = _shred_pages(_page_files(args.pages), cfg)
        if len(pages) > 1 and not args.mix:
            raise ValueError("several pages given; pass --mix to reconstruct them as one instance")
        shreds = [sh for page in pages for sh in page]
    multi = len({sh.page_id for sh in shreds}) > 1
    inst = ReconstructionInstance(tuple(shreds), multi)
    if args.permute_seed is not None:
        inst = permute_instance(inst, args.permute_seed)
    return inst


def _load_model(path):
    from .projector import load_weights

    return load_weights(path)


# -- commands ---------------------------------------------------------------------


def cmd_synth(args, cfg: Config) -> int:
    from .synth import write_corpus

    paths = write_corpus(args.out, args.count, cfg.seed, cfg.page_width, cfg.page_height,
                         (cfg.font_min, cfg.font_max))
    print(f"wrote {len(paths)} pages to {args.out}")
    return 0


def cmd_shred(args, cfg: Config) -> int:
    from .docproc import save_shreds

    for page in _shred_pages(_page_files(args.pages), cfg):
        out = Path(args.out) / page[0].page_id
        save_shreds(page, out)
        print(f"{page[0].page_id}: {len(page)} shreds -> {out}")
    return 0


def cmd_extract(args, cfg: Config) -> int:
    from .sampling import extract_corpus, save_dataset

    if cfg.s_y != cfg.s:
        raise ValueError("dataset files hold square samples; use bench --sweep sy=... for other heights")
    pages = _shred_pages(_page_files(args.pages), cfg)
    ds = extract_corpus(pages, cfg.s, cfg.stride, cfg.max_pos, cfg.blank_ratio, cfg.noise_cols,
                        cfg.noise_p, cfg.seed, neg_rows=cfg.neg_rows)
    save_dataset(ds, args.out)
    positives = int(ds.y.sum())
    print(f"{len(ds)} pairs from {len(pages)} pages ({positives} positive) -> {args.out}")
    return 0


def cmd_train(args, cfg: Config) -> int:
    from .sampling import load_dataset, split_train_val
    from .trainer import TrainConfig, TrainingDiverged, best_record, resume, train, write_training_log
    from .projector import save_weights

    data = load_dataset(args.data)
    if args.val:
        train_ds, val_ds = data, load_dataset(args.val)
    else:
        train_ds, val_ds = split_train_val(data, cfg.val_docs, seed=cfg.seed)
    tcfg = TrainConfig(epochs=cfg.epochs, lr=cfg.lr, batch=cfg.batch, margin=cfg.margin, seed=cfg.seed,
                       d=cfg.d, s_y=data.s_y, s_x=data.s, loss_convention=cfg.loss_label_convention)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints"
    try:
        if args.resume:
            best, records = resume(args.resume, train_ds, val_ds, tcfg, args.start_epoch,
                                   checkpoint_dir=ckpt_dir)
        else:
            best, records = train(train_ds, val_ds, tcfg, checkpoint_dir=ckpt_dir)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}; last checkpoint {exc.last_checkpoint}", file=sys.stderr)
        return 3
    write_training_log(records, out / "training_log.csv")
    save_weights(best, out / "best.shrw")
    rec = best_record(records)
    _write_json(out / "train_report.json", {"config": asdict(cfg), "best_epoch": rec.epoch,
                                            "best_smd": rec.smd, "train_pairs": len(train_ds),
                                            "val_pairs": len(val_ds)})
    print(f"best epoch {rec.epoch} smd {rec.smd:.4f} -> {out / 'best.shrw'}")
    return 0


def cmd_embed(args, cfg: Config) -> int:
    """Boundary embeddings of every shred as CSV (one row per shred side and row)."""
    import csv

    from .docproc import ReconstructionInstance, load_shreds
    from .pipeline import embed_instance

    pair = _load_model(args.model)
    shreds = [sh for d in args.shreds for sh in load_shreds(d)]
    rights, lefts = embed_instance(pair, ReconstructionInstance(tuple(shreds), False))
    path = Path(args.out)
    tmp = path.with_name(path.name + ".partial")
    with tmp.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["shred", "side", "row"] + [f"e{k}" for k in range(pair.d)])
        for tensor in [t for pair_ in zip(rights, lefts) for t in pair_]:
            for i, row in enumerate(tensor.data[:, 0, :]):
                writer.writerow([tensor.shred_ref, tensor.side, i] + [repr(float(v)) for v in row])
    tmp.replace(path)
    print(f"embedded {len(shreds)} shreds -> {path}")
    return 0


def cmd_reconstruct(args, cfg: Config) -> int:
    from .compat import CompatConfig, save_cost_matrix
    from .docproc import concat_shreds, save_png
    from .pipeline import SolverConfig, reconstruct

    pair = _load_model(args.model)
    inst = _instance_from_args(args, cfg)
    echo = {"config": asdict(cfg), "model": Path(args.model).name, "permute_seed": args.permute_seed}
    solution, matrix, report = reconstruct(pair, inst, CompatConfig(cfg.delta_max, cfg.squared),
                                           SolverConfig(cfg.exact_limit, cfg.seed, cfg.restarts), echo)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    _write_json(out / "solution.json", solution.to_dict())
    save_cost_matrix(matrix, out / "cost_matrix.csv")
    if args.render:
        img = concat_shreds([inst.shreds[i] for i in solution.order], args.seam_marker, inst.multi_page)
        save_png(img, out / "render.png")
    label = "relaxed accuracy" if inst.multi_page else "accuracy"
    value = report.relaxed_accuracy if inst.multi_page else report.accuracy
    print(f"n={inst.n} {label} {value:.4f} (strict {report.accuracy:.4f}) -> {out / 'report.json'}")
    return 0


def query_nn(pair, query: np.ndarray, query_side: str, candidates, k: int):
    """Rank candidates of the complementary side by embedding distance to the query."""
    from .projector import embed_sample

    if len(candidates) == 0:
        raise ValueError("empty candidate set")
    other = "left" if query_side == "right" else "right"
    q = embed_sample(pair, query_side, query).reshape(-1).astype(np.float64)
    E = embed_sample(pair, other, np.stack(candidates)).reshape(len(candidates), -1).astype(np.float64)
    dist = np.sqrt(((E - q) ** 2).sum(axis=1))
    order = np.argsort(dist, kind="stable")[: min(k, len(candidates))]
    return [(int(i), float(dist[i])) for i in order]


def cmd_query_nn(args, cfg: Config) -> int:
    from .docproc import load_image

    pair = _load_model(args.model)

    def sample(path):
        img = load_image(path) < 128
        if img.shape != (pair.s_y, pair.s_x):
            raise ValueError(f"{path}: samples must be {pair.s_y}x{pair.s_x}, got {img.shape}")
        return img

    files = _page_files(args.candidates)
    ranked = query_nn(pair, sample(args.query), args.side, [sample(f) for f in files], args.k)
    result = [{"rank": r + 1, "file": files[i].name, "distance": d} for r, (i, d) in enumerate(ranked)]
    for row in result:
        print(f"{row['rank']:3d}  {row['distance']:.6f}  {row['file']}")
    if args.out:
        _write_json(args.out, {"query": str(args.query), "side": args.side, "ranking": result})
    return 0


def cmd_render(args, cfg: Config) -> int:
    from .docproc import concat_shreds, load_shreds, save_png

    solution = json.loads(Path(args.solution).read_text())
    shreds = [sh for d in args.shreds for sh in load_shreds(d)]
    order = solution["order"]
    if sorted(order) != list(range(len(shreds))):
        raise ValueError("solution order does not match the shred set")
    multi = len({sh.page_id for sh in shreds}) > 1
    save_png(concat_shreds([shreds[i] for i in order], args.seam_marker, multi), args.out)
    print(f"rendered {len(order)} shreds -> {args.out}")
    return 0


def bench_instance(pages, n: int, seed: int):
    """First ``n`` shreds of the concatenated pages, mixed into one instance."""
    from .docproc import ReconstructionInstance, permute_instance

    shreds = [sh for page in pages for sh in page]
    if n > len(shreds):
        raise ValueError(f"need {n} shreds but the pages provide {len(shreds)}")
    shreds = shreds[:n]
    multi = len({sh.page_id for sh in shreds}) > 1
    return permute_instance(ReconstructionInstance(tuple(shreds), multi), seed)


def run_bench(pair, pages, sizes, cfg: Config):
    from .compat import CompatConfig
    from .pipeline import SolverConfig, reconstruct

    reports = []
    for n in sizes:
        inst = bench_instance(pages, n, cfg.seed)
        _, _, report = reconstruct(pair, inst, CompatConfig(cfg.delta_max, cfg.squared),
                                   SolverConfig(cfg.exact_limit, cfg.seed, cfg.restarts))
        log.info("n=%d pro %.3fs pw %.3fs opt %.3fs", n, report.timings["pro"],
                 report.timings["pw"], report.timings["opt"])
        reports.append(report)
    return reports


def _bench_pages(args, cfg: Config, count: int):
    from .docproc import shred_page
    from .sampling import derive_seed
    from .synth import render_page

    if args.pages:
        return _shred_pages(_page_files(args.pages), cfg)
    return [shred_page(render_page(derive_seed(cfg.seed + 1, i), cfg.page_width, cfg.page_height,
                                   (cfg.font_min, cfg.font_max)),
                       cfg.strips, f"bench_{i:04d}") for i in range(count)]


def _parse_sweep(text: str):
    key, _, values = text.partition("=")
    if key not in ("d", "sy") or not values:
        raise ValueError("--sweep takes d=v1,v2,... or sy=v1,v2,...")
    return key, [int(v) for v in values.split(",")]


def cmd_bench(args, cfg: Config) -> int:
    from .metrics import BATCH_COLUMNS, write_batch_csv

    sizes = [int(v) for v in args.sizes.split(",")]
    pages = _bench_pages(args, cfg, -(-max(sizes) // cfg.strips))
    if not args.sweep:
        if not args.model:
            raise ValueError("bench needs --model (or --sweep with --train-pages)")
        write_batch_csv(run_bench(_load_model(args.model), pages, sizes, cfg), args.out)
        print(f"wrote {len(sizes)} rows -> {args.out}")
        return 0

    import csv

    from .sampling import extract_corpus, split_train_val
    from .trainer import TrainConfig, train

    key, values = _parse_sweep(args.sweep)
    if not args.train_pages:
        raise ValueError("--sweep needs --train-pages to train one model per value")
    train_pages = _shred_pages(_page_files(args.train_pages), cfg)
    rows = []
    for v in values:
        vcfg = replace(cfg, **({"d": v} if key == "d" else {"s_y": v})).validate()
        ds = extract_corpus(train_pages, vcfg.s, vcfg.stride, vcfg.max_pos, vcfg.blank_ratio,
                            vcfg.noise_cols, vcfg.noise_p, vcfg.seed, s_y=vcfg.s_y, neg_rows=vcfg.neg_rows)
        tr, va = split_train_val(ds, vcfg.val_docs, seed=vcfg.seed)
        best, _ = train(tr, va, TrainConfig(epochs=vcfg.epochs, lr=vcfg.lr, batch=vcfg.batch,
                                            margin=vcfg.margin, seed=vcfg.seed, d=vcfg.d,
                                            s_y=vcfg.s_y, s_x=vcfg.s,
                                            loss_convention=vcfg.loss_label_convention))
        for report in run_bench(best, pages, sizes, vcfg):
            rows.append({key: v, **report.batch_row()})
    path = Path(args.out)
    tmp = path.with_name(path.name + ".partial")
    with tmp.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=(key,) + BATCH_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    tmp.replace(path)
    print(f"wrote {len(rows)} rows -> {path}")
    return 0


# -- argument parsing ---------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides (default: built-in, then --config file)")
    for f in fields(Config):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            g.add_argument(flag, dest=f.name, default=None, type=lambda v: v.lower() in ("1", "true", "yes"),
                           metavar="BOOL", help=f"(default {f.default})")
        else:
            kind = {"int": int, "float": float, "str": str}[str(f.type)]
            g.add_argument(flag, dest=f.name, default=None, type=kind, help=f"(default {f.default})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shredrec", description="Reconstruct strip-shredded documents.")
    parser.add_argument("--config", help="JSON file of config keys")
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        _add_config_flags(p)
        return p

    p = add("synth", cmd_synth, "render synthetic text pages")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--out", required=True)

    p = add("shred", cmd_shred, "virtually shred pages into shred directories")
    p.add_argument("--pages", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p = add("extract", cmd_extract, "extract labeled sample pairs to a dataset file")
    p.add_argument("--pages", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train the projection networks")
    p.add_argument("--data", required=True)
    p.add_argument("--val", help="separate validation dataset (default: split --data by document)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--start-epoch", type=int, default=0)

    p = add("embed", cmd_embed, "write boundary embeddings of shreds to CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--shreds", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p = add("reconstruct", cmd_reconstruct, "order shreds and write a run report")
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--shreds", nargs="+", help="shred directories")
    src.add_argument("--pages", nargs="+", help="page images (virtually shredded)")
    p.add_argument("--mix", action="store_true", help="mix all given pages into one instance")
    p.add_argument("--permute-seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--render", action="store_true", help="also write render.png")
    p.add_argument("--seam-marker", type=int, default=4, help="marker width at page seams (0 = off)")

    p = add("query-nn", cmd_query_nn, "rank complementary samples for a query sample")
    p.add_argument("--model", required=True)
    p.add_argument("--query", required=True, help="s_y x s_x sample image")
    p.add_argument("--side", choices=("right", "left"), default="right",
                   help="query is an r-sample (right) or an l-sample (left)")
    p.add_argument("--candidates", nargs="+", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out")

    p = add("render", cmd_render, "place shreds side by side in solution order")
    p.add_argument("--solution", required=True)
    p.add_argument("--shreds", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seam-marker", type=int, default=4)

    p = add("bench", cmd_bench, "time the reconstruction stages for several instance sizes")
    p.add_argument("--model")
    p.add_argument("--sizes", default="60,120,240,480")
    p.add_argument("--pages", nargs="+", help="page images (default: synthetic)")
    p.add_argument("--sweep", help="d=v1,v2,... or sy=v1,v2,... (trains one model per value)")
    p.add_argument("--train-pages", nargs="+")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {name: getattr(args, name) for name in CONFIG_FIELDS if hasattr(args, name)}
    try:
        cfg = load_config(args.config, overrides)
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args, cfg)
        return args.func(args, cfg)
    except (ValueError, OSError) as exc:
        print(f"shredrec {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
