from __future__ import annotations

import argparse
import json
import logging
import os
from pathlib import Path

import torch

from . import storage
from .attacks import AttackConfig
from .auxnets import (
    diou_labels,
    gen_refiner_pairs,
    load_estimator,
    load_refiner,
    save_auxiliary,
    save_pairs,
    split_pairs_by_image,
    train_diou,
    train_refiner,
)
from .config import ExperimentConfig, default_config, load_config
from .core import ConfigError, SittaError, image_to_tensor, load_adapter
from .corruptions import CorpusIndex, derive_corrupted_dataset, materialize_corpus
from .harness import CorpusSample, ResultStore, grid_search, runnable_configs, scorable_samples
from .metrics import confusion_counts
from .report import evaluation_table, plot_mask_evolution, write_report
from .testbed import ShapesSpec, make_shapes_dataset, train_toy_segmenter
from .tta import AuxModels, TTAConfig, adapt_single_image, refine_prediction

APP_NAME = "sitta"
LOG_ENV = "SITTA_LOG_LEVEL"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

logger = logging.getLogger(__name__)


def configure_logging(verbosity: int = 0) -> None:
    """-q -> ERROR, default -> SITTA_LOG_LEVEL or WARNING, -v -> INFO, -vv -> DEBUG."""
    if verbosity < 0:
        level = logging.ERROR
    elif verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    else:
        level = logging.getLevelName(os.getenv(LOG_ENV, "WARNING").upper())
        if not isinstance(level, int):
            level = logging.WARNING
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def _config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.corruptions.seed = args.seed
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg.workers = args.workers
    return cfg


def _refiner_path(cfg: ExperimentConfig) -> Path:
    return cfg.aux.refiner or cfg.output_dir / "aux" / "refiner.pt"


def _estimator_path(cfg: ExperimentConfig) -> Path:
    return cfg.aux.estimator or cfg.output_dir / "aux" / "diou.pt"


def _load_aux(cfg: ExperimentConfig) -> AuxModels:
    ref, est = _refiner_path(cfg), _estimator_path(cfg)
    return AuxModels(
        refiner=load_refiner(ref) if ref.is_file() else None,
        estimator=load_estimator(est) if est.is_file() else None,
    )


def _corpus_index(cfg: ExperimentConfig) -> CorpusIndex:
    path = cfg.corpus_dir / "index.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"corpus index not found: {path} (run `sitta corrupt` first)")
    return CorpusIndex.from_jsonl(path)


def load_corpus(cfg: ExperimentConfig, only: str | None = None) -> list[CorpusSample]:
    ds = storage.Dataset(cfg.dataset.root)
    samples = []
    for entry in _corpus_index(cfg):
        sample_id = Path(entry.path).stem
        if only is not None and sample_id != only:
            continue
        image = image_to_tensor(storage.read_image(cfg.corpus_dir / entry.path))
        samples.append(CorpusSample(sample_id, entry.kind, entry.level, image, ds.mask(entry.image_id)))
    if only is not None and not samples:
        raise ValueError(f"no corpus image named {only!r}")
    return samples


def cmd_testbed(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    tb = cfg.testbed
    spec = ShapesSpec(size=tb.size, seed=cfg.seed)
    dataset = make_shapes_dataset(tb.n_images, spec)
    dataset.write(cfg.dataset.root)
    model = train_toy_segmenter(
        dataset, epochs=tb.epochs, lr=tb.lr, seed=cfg.seed, batch_size=tb.batch_size, checkpoint=cfg.model.checkpoint
    )
    curve = model.module.train_history
    print(f"Dataset: {len(dataset)} images in {cfg.dataset.root}")
    print(f"Segmenter: {cfg.model.checkpoint} (final ce {curve[-1]:.4f})")
    return 0


def cmd_corrupt(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    ds = storage.Dataset(cfg.dataset.root)
    c = cfg.corruptions
    index = derive_corrupted_dataset(
        ds.ids, c.kinds, c.levels, c.seed, {it.image_id: it.image for it in ds.items}
    )
    materialize_corpus(index, ds.image, cfg.corpus_dir)
    print(f"Corpus: {len(index)} images in {cfg.corpus_dir}")
    return 0


def cmd_train_aux(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    model = load_adapter(cfg.model.checkpoint, cfg.model.arch)
    ds = storage.Dataset(cfg.dataset.root)
    images = [
        (i, image_to_tensor(ds.image(i)), torch.from_numpy(ds.mask(i))) for i in ds.ids
    ]
    attack = AttackConfig(cfg.attack.steps, cfg.attack.step_size, cfg.attack.budget, cfg.seed)
    pairs = gen_refiner_pairs(model, images, attack, cfg.aux.target_kind, harvest=_harvest(attack.steps))
    save_pairs(pairs, cfg.pairs_dir, attack.step_size, cfg.seed)
    train, val = split_pairs_by_image(pairs, cfg.aux.val_fraction, cfg.seed)
    a = cfg.aux
    if args.which in ("refiner", "both"):
        refiner = train_refiner(train, a.epochs, a.lr, cfg.seed, a.batch_size, val_pairs=val)
        print(f"Refiner: {save_auxiliary(refiner, _refiner_path(cfg))}")
    if args.which in ("diou", "both"):
        estimator = train_diou(diou_labels(train), a.epochs, a.lr, cfg.seed, a.batch_size)
        print(f"IoU estimator: {save_auxiliary(estimator, _estimator_path(cfg))}")
    return 0


def _harvest(steps: int) -> tuple[int, ...]:
    return tuple(t for t in range(2, steps + 1, 2)) or (steps,)


def cmd_adapt(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    tta = TTAConfig(args.method, args.loss, args.scope, args.lr, args.iterations, cfg.seed)
    model = load_adapter(cfg.model.checkpoint, cfg.model.arch)
    aux = _load_aux(cfg)
    samples = scorable_samples(load_corpus(cfg, only=args.image))
    out = cfg.output_dir / "adapt" / tta.key.replace("/", "_")
    out.mkdir(parents=True, exist_ok=True)
    counts: dict[str, list] = {"NA": [], tta.column: []}
    if aux.refiner is not None:
        counts["Ref-direct"] = []
    rows = []
    for s in samples:
        record = adapt_single_image(model, s.image, tta, aux, gt=s.gt, image_id=s.sample_id)
        rows.append(record.to_row(s.kind, s.level))
        counts["NA"].append(confusion_counts(record.na.mask, s.gt, model.num_classes))
        counts[tta.column].append(confusion_counts(record.final.mask, s.gt, model.num_classes))
        if aux.refiner is not None:
            direct = refine_prediction(model, s.image, aux.refiner)
            counts["Ref-direct"].append(confusion_counts(direct, s.gt, model.num_classes))
        if args.image is not None:
            plot_mask_evolution(record.masks, out / f"{s.sample_id}_masks.png")
    storage.write_jsonl(out / "results.jsonl", rows, schema="result_row")
    table = evaluation_table(counts)
    table.to_csv(out / "metrics.csv", float_format="%.4f")
    if args.json:
        print(json.dumps(table.round(4).to_dict(orient="index"), indent=2))
    else:
        for name, row in table.iterrows():
            print(f"{name}: m̄IoU_i {row['miou_i']:.2f} | mIoU {row['miou']:.2f} | m̄IoU_c {row['miou_c']:.2f}")
    return 0


def cmd_grid(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    aux = _load_aux(cfg)
    configs = runnable_configs(cfg.tta_configs(), aux)
    store = ResultStore(cfg.results_dir)
    if args.dry_run:
        n_images = len(_corpus_index(cfg))
        done = store.completed()
        pending = sum(
            1 for e in _corpus_index(cfg) for c in configs if (Path(e.path).stem, c.key) not in done
        )
        print(f"Jobs: {n_images * len(configs)} ({n_images} images x {len(configs)} configs), {pending} pending")
        return 0
    model = load_adapter(cfg.model.checkpoint, cfg.model.arch)
    corpus = load_corpus(cfg)
    table = grid_search(
        corpus, model, configs, aux, cfg.grid.iterations, store, workers=cfg.workers, progress=not args.quiet
    )
    print(f"Results: {len(table)} rows in {store.csv}")
    return 0


def cmd_report(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    store = ResultStore(cfg.results_dir)
    table = store.table()
    if not len(table):
        print(f"Error: no results in {store.jsonl}")
        return 2
    granularity = args.granularity or cfg.grid.granularity
    report = write_report(table, cfg.report_dir, granularity, args.methods)
    print(report.rendered().to_string())
    print(f"Report: {cfg.report_dir}")
    return 0


COMMANDS = {
    "testbed": cmd_testbed,
    "corrupt": cmd_corrupt,
    "train-aux": cmd_train_aux,
    "adapt": cmd_adapt,
    "grid": cmd_grid,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="YAML experiment config (default: built-in defaults)")
    common.add_argument("--seed", type=int, help="Override the global seed")
    common.add_argument("--workers", type=int, help="Override the worker count")
    common.add_argument("-v", "--verbose", action="count", default=0, help="More logging (-vv for debug)")
    common.add_argument("-q", "--quiet", action="store_true", help="Only log errors; no progress bars")

    parser = argparse.ArgumentParser(prog=APP_NAME, description="Single-image test-time adaptation experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("testbed", parents=[common], help="Generate the shapes dataset and train the toy segmenter")
    sub.add_parser("corrupt", parents=[common], help="Derive the corrupted corpus")
    p = sub.add_parser("train-aux", parents=[common], help="Train the mask refiner and/or IoU estimator")
    p.add_argument("--which", choices=["refiner", "diou", "both"], default="both")
    p = sub.add_parser("adapt", parents=[common], help="Adapt corpus images with one configuration")
    p.add_argument("--method", required=True, help="Ent, PL, AugCo, Adv, Ref or dIoU")
    p.add_argument("--loss", required=True, help="ce, iou, ent, kl or none")
    p.add_argument("--scope", default="full", choices=["full", "norm-affine"])
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--image", type=str, help="Single corpus image, e.g. shape00000__fog__L3")
    p.add_argument("--json", action="store_true", help="Output JSON")
    p = sub.add_parser("grid", parents=[common], help="Run (or resume) the hyper-parameter grid")
    p.add_argument("--dry-run", dest="dry_run", action="store_true", help="Print the job count and exit")
    p = sub.add_parser("report", parents=[common], help="Tables and figures from stored results")
    p.add_argument("--granularity", choices=["overall", "per-corruption", "per-level"])
    p.add_argument("--methods", nargs="+", help="Columns to analyse, e.g. PL/iou/full")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(-1 if args.quiet else args.verbose)
    try:
        cfg = _config(args)
        return COMMANDS[args.command](cfg, args)
    except (SittaError, ValueError, FileNotFoundError, KeyError) as e:
        print(f"Error: {e}")
        return 2


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
