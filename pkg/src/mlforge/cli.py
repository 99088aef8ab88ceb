"""Single binary exposing every pipeline stage as a subcommand.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical
failure. Errors print to stderr with the machine-parsable prefix
``E:<module>:<code>``. All randomness flows from ``--seed`` through named
per-module sub-streams, so identical invocations replay byte-identical
outputs (the only exception is opt-in wall-clock timing in ``distsim``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import cooccur, curation, distsim, metrics, preprocess, taxonomy, trainer
from .errors import MLForgeError, NumericalError, UsageError
from .seeds import substream

logger = logging.getLogger("mlforge")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _configure_logging() -> None:
    level = os.environ.get("MLFORGE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def manifest_arrays(manifest: curation.Manifest, vocab: list[int] | None = None):
    """Dense (X, Y, vocab) arrays from a manifest with feature vectors."""
    if manifest.feature_dim is None:
        raise MLForgeError("curation", "parse", "manifest has no feature vectors")
    if vocab is None:
        vocab = manifest.vocabulary()
    index = {cat: i for i, cat in enumerate(vocab)}
    X = np.zeros((len(manifest.records), manifest.feature_dim))
    Y = np.zeros((len(manifest.records), len(vocab)))
    for row, rec in enumerate(manifest.records):
        if rec.features is None:
            raise MLForgeError("curation", "parse", f"{rec.image_id}: missing features")
        X[row] = rec.features
        for cat in rec.tags:
            if cat not in index:
                raise MLForgeError("curation", "parse", f"{rec.image_id}: tag {cat} not in vocabulary")
            Y[row, index[cat]] = 1.0
    return X, Y, vocab


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_taxonomy_stats(args) -> int:
    graph = taxonomy.load_taxonomy(args.taxonomy)
    stats = taxonomy.hierarchy_stats(graph)
    from .reports import taxonomy_report

    text = taxonomy_report(stats)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return 0


def cmd_augment(args) -> int:
    manifest = curation.read_manifest(args.manifest)
    graph = taxonomy.load_taxonomy(args.taxonomy)
    if args.pairs:
        pairs = cooccur.read_pairs(args.pairs)
        manifest = cooccur.augment_by_cooccurrence(manifest, pairs)
    manifest = cooccur.propagate_hierarchy(manifest, graph)
    curation.write_manifest(manifest, args.out)
    logger.info("augmented %d records -> %s", len(manifest), args.out)
    return 0


def cmd_curate(args) -> int:
    manifest = curation.read_manifest(args.manifest)
    if args.merge:
        other = curation.read_manifest(args.merge)
        synonym_map: dict[int, int] = {}
        if args.synonyms:
            with open(args.synonyms, "r", encoding="utf-8") as fh:
                for lineno, raw in enumerate(fh, start=1):
                    line = raw.strip()
                    if not line or line.startswith("#"):
                        continue
                    parts = line.split("\t")
                    if len(parts) != 2:
                        raise MLForgeError("curation", "parse", f"synonyms line {lineno}: expected 2 fields")
                    synonym_map[int(parts[0])] = int(parts[1])
        manifest = curation.merge_vocabularies(manifest, other, synonym_map)
    removed: set[int] = set()
    if args.min_count is not None or args.drop_list:
        drop: set[int] = set()
        if args.drop_list:
            with open(args.drop_list, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line and not line.startswith("#"):
                        drop.add(int(line))
        manifest, removed = curation.filter_vocabulary(
            manifest, args.min_count if args.min_count is not None else 0, drop
        )
        logger.info("removed %d categories", len(removed))
    if args.val_size is not None:
        rng = substream(args.seed, "curation.split")
        train, val = curation.split_validation(manifest, args.val_size, args.val_cap, rng)
        if not args.out_train or not args.out_val:
            raise UsageError("curate: --val-size requires --out-train and --out-val")
        curation.write_manifest(train, args.out_train)
        curation.write_manifest(val, args.out_val)
    elif args.out:
        curation.write_manifest(manifest, args.out)
    else:
        raise UsageError("curate: nothing to do (need --out or --val-size)")
    return 0


def cmd_stats(args) -> int:
    manifest = curation.read_manifest(args.manifest)
    stats = curation.dataset_stats(manifest)
    from .reports import write_stats_report

    write_stats_report(
        stats,
        len(manifest),
        args.out_dir,
        trainable_threshold=args.trainable_threshold,
        log2=args.log2,
        figures=not args.no_figures,
    )
    return 0


def cmd_preprocess(args) -> int:
    img = preprocess.read_raster(args.input)
    config = preprocess.PreprocessConfig(
        area_range=(args.area_min, args.area_max),
        out_size=args.out_size,
        flip_prob=args.flip_prob,
        rotate_prob=args.rotate_prob,
        color_prob=args.color_prob,
        seed=args.preprocess_seed if args.preprocess_seed is not None else args.seed,
    )
    rng = substream(config.seed, "preprocess")
    out = preprocess.preprocess_image(img, config, rng)
    preprocess.write_raster(out, args.out)
    return 0


def _load_training_setup(args):
    run_cfg = trainer.load_run_config(args.config)
    manifest = curation.read_manifest(args.manifest)
    X, Y, vocab = manifest_arrays(manifest)
    return run_cfg, manifest, X, Y, vocab


def cmd_train(args) -> int:
    run_cfg, _, X, Y, vocab = _load_training_setup(args)
    dims = run_cfg.model_dims or [X.shape[1], 32, len(vocab)]
    if dims[0] != X.shape[1] or dims[-1] != len(vocab):
        raise MLForgeError(
            "trainer", "dim-mismatch",
            f"model dims {dims} do not match features {X.shape[1]} / vocabulary {len(vocab)}",
        )
    model = trainer.build_model(
        dims,
        substream(args.seed, "trainer.init"),
        groups=run_cfg.model_groups,
        hidden_activation=run_cfg.hidden_activation,
        head_activation=run_cfg.head_activation,
    )
    opt = trainer.OptimizerState.for_model(model, run_cfg.momentum, run_cfg.weight_decay)
    state = trainer.AdaptiveWeightState(len(vocab))
    losses = trainer.train_run(
        model, X, Y, args.steps, opt, run_cfg.loss, run_cfg.schedule, state,
        substream(args.seed, "trainer.sample"), steps_per_epoch=run_cfg.steps_per_epoch,
    )
    trainer.save_checkpoint(model, args.out, opt)
    if args.out_dir:
        from .reports import write_loss_log

        write_loss_log(losses, args.out_dir, figures=not args.no_figures)
    logger.info("final loss %.6f", losses[-1] if losses else float("nan"))
    return 0


def cmd_finetune(args) -> int:
    run_cfg = trainer.load_run_config(args.config)
    pretrained, _ = trainer.load_checkpoint(args.checkpoint)
    manifest = curation.read_manifest(args.manifest)
    X, Y, vocab = manifest_arrays(manifest)
    head_dim = args.new_head or len(vocab)
    if head_dim < len(vocab):
        raise MLForgeError(
            "trainer", "dim-mismatch",
            f"--new-head {head_dim} smaller than the manifest vocabulary ({len(vocab)})",
        )
    if args.mode == "single":
        labels = np.zeros(len(manifest.records), dtype=int)
        for row, rec in enumerate(manifest.records):
            if len(rec.tags) != 1:
                raise MLForgeError(
                    "curation", "parse",
                    f"{rec.image_id}: single-label fine-tuning needs exactly one tag",
                )
            labels[row] = vocab.index(next(iter(rec.tags)))
        data = (X, labels)
    else:
        data = (X, Y)
    model = trainer.fine_tune(
        pretrained, head_dim, run_cfg.schedule, data,
        mode=args.mode, loss_cfg=run_cfg.loss, steps=args.steps,
        seed=substream(args.seed, "trainer.finetune"),
        momentum=run_cfg.momentum, weight_decay=run_cfg.weight_decay,
        steps_per_epoch=run_cfg.steps_per_epoch,
    )
    trainer.save_checkpoint(model, args.out)
    return 0


def cmd_eval(args) -> int:
    manifest = curation.read_manifest(args.truth)
    vocab = manifest.vocabulary()
    index = {cat: i for i, cat in enumerate(vocab)}
    Y = np.zeros((len(manifest.records), len(vocab)))
    for row, rec in enumerate(manifest.records):
        for cat in rec.tags:
            Y[row, index[cat]] = 1.0
    scores = metrics.read_scores(args.scores, len(vocab))
    S = np.zeros_like(Y)
    by_id = dict(scores)
    for row, rec in enumerate(manifest.records):
        if rec.image_id not in by_id:
            raise MLForgeError("metrics", "shape-mismatch", f"no scores for {rec.image_id}")
        S[row] = by_id[rec.image_id]
    result = metrics.instance_metrics(Y, S, args.k)
    from .reports import eval_report_text, write_per_instance_csv

    text = eval_report_text(result)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    sys.stdout.write(text)
    if args.per_instance:
        write_per_instance_csv(Y, S, args.k, args.per_instance)
    return 0


def cmd_distsim(args) -> int:
    run_cfg = trainer.load_run_config(args.config)
    if args.manifest:
        manifest = curation.read_manifest(args.manifest)
        X, Y, vocab = manifest_arrays(manifest)
        dims = run_cfg.model_dims or [X.shape[1], 32, len(vocab)]
    else:
        dims = run_cfg.model_dims or [16, 32, 8]
        data_rng = substream(args.seed, "distsim.data")
        n = max(args.workers * args.batch * 4, 256)
        X = data_rng.normal(size=(n, dims[0]))
        truth = data_rng.normal(size=(dims[0], dims[-1]))
        Y = (X @ truth > 0.5).astype(float)
    init_model = trainer.build_model(
        dims,
        substream(args.seed, "trainer.init"),
        groups=run_cfg.model_groups,
        hidden_activation=run_cfg.hidden_activation,
        head_activation=run_cfg.head_activation,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    result = distsim.parallel_train(
        args.workers, args.batch, args.steps, substream(args.seed, "distsim.train"),
        run_cfg, (X, Y), init_model,
    )
    trainer.save_checkpoint(result.model, os.path.join(args.out_dir, "checkpoint.txt"))
    from .reports import write_divergence_log, write_scaling_report

    write_divergence_log(result.divergence, os.path.join(args.out_dir, "divergence.csv"))
    timings: dict[int, float] = {}
    if args.timings:
        with open(args.timings, "r", encoding="utf-8") as fh:
            for raw in fh:
                line = raw.strip()
                if not line or line.startswith("#") or line.startswith("k,"):
                    continue
                k_str, _, sec_str = line.partition(",")
                timings[int(k_str)] = float(sec_str)
    elif args.time_scaling:
        # wall-clock, illustrative only: not replayable across invocations
        for k in sorted({1, args.workers}):
            start = time.perf_counter()
            distsim.parallel_train(
                k, args.batch, args.steps, substream(args.seed, "distsim.train"),
                run_cfg, (X, Y), init_model, check_replicas=False,
            )
            timings[k] = (time.perf_counter() - start) / max(1, args.steps)
    if timings:
        report = distsim.scaling_report(timings, args.batch)
        write_scaling_report(report, args.out_dir, figures=not args.no_figures)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="mlforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("taxonomy-stats", help="hierarchy statistics report")
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_taxonomy_stats)

    p = sub.add_parser("augment", help="co-occurrence + hierarchy tag augmentation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--pairs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("curate", help="filter/merge vocabularies and split validation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--merge")
    p.add_argument("--synonyms")
    p.add_argument("--min-count", type=int)
    p.add_argument("--drop-list")
    p.add_argument("--val-size", type=int)
    p.add_argument("--val-cap", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--out-train")
    p.add_argument("--out-val")
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("stats", help="dataset statistics report with figures")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--log2", action="store_true")
    p.add_argument("--trainable-threshold", type=int, default=100)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("preprocess", help="six-step raster pre-processing")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--out-size", type=int, default=224)
    p.add_argument("--area-min", type=float, default=0.05)
    p.add_argument("--area-max", type=float, default=1.0)
    p.add_argument("--flip-prob", type=float, default=0.5)
    p.add_argument("--rotate-prob", type=float, default=0.25)
    p.add_argument("--color-prob", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preprocess-seed", type=int)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the desk-scale model on a manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--out-dir")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="replace the head and fine-tune per group multipliers")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=("single", "multi"), default="single")
    p.add_argument("--new-head", type=int)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="instance-level precision/recall/F1 at top-k")
    p.add_argument("--truth", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--per-instance")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("distsim", help="simulated synchronous data-parallel training")
    p.add_argument("--workers", type=int, required=True)
    p.add_argument("--batch", type=int, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", required=True)
    p.add_argument("--manifest")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--timings", help="CSV of k,seconds_per_step (replayable scaling report)")
    p.add_argument("--time-scaling", action="store_true",
                   help="wall-clock the k=1 baseline and the requested k (not replayable)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_distsim)

    return parser


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        sys.stderr.write(str(err) + "\n")
        return 1
    except SystemExit as err:  # --help
        return int(err.code or 0)
    try:
        return args.func(args) or 0
    except UsageError as err:
        sys.stderr.write(str(err) + "\n")
        return 1
    except NumericalError as err:
        sys.stderr.write(err.cli_format() + "\n")
        return 3
    except MLForgeError as err:
        sys.stderr.write(err.cli_format() + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
