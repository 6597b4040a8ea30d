"""Command-line front end: reproducible pipeline runs from one config.

Stages share a flat workdir with conventional filenames
(``<slide_id>.hpyr``, ``<slide_id>.truth.hpyr``, ``<slide_id>.index.csv``,
``<slide_id>.heat.pfm``, ``<slide_id>.mask.pgm``) so each command discovers
the previous stage's outputs. Exit codes: 0 success, 2 config error,
3 missing prerequisite, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import cluster as cluster_mod
from . import evaluate as eval_mod
from . import heatmap as heatmap_mod
from . import learn, pyramid, sampler, synthetic, tissue
from .config import ConfigError, RunConfig, load_config
from .errors import PipelineError
from .formats import load_pfm, load_pgm, save_pfm, save_pgm

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_RUNTIME = 4


class MissingPrerequisite(PipelineError):
    """A required artifact from an earlier stage does not exist."""


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def _load_run_config(args) -> RunConfig:
    overrides: dict = {}
    if args.workdir is not None:
        overrides["workdir"] = args.workdir
    elif args.config is None and os.environ.get("H2G_WORKDIR"):
        overrides["workdir"] = os.environ["H2G_WORKDIR"]
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["sampler.workers"] = args.workers
    cfg = load_config(args.config, overrides=overrides)
    if args.config is not None and args.workdir is None \
            and cfg.raw["workdir"] == "." and os.environ.get("H2G_WORKDIR"):
        cfg.raw["workdir"] = os.environ["H2G_WORKDIR"]
    _say(args, f"config {cfg.content_hash()}")
    return cfg


def _require_file(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(f"missing {what}: {path}")
    return path


def _load_pyramids(cfg: RunConfig, manifest: pyramid.SlideManifest,
                   entries) -> dict[str, pyramid.PyramidImage]:
    return {e.slide_id: pyramid.read_file(e.image_path) for e in entries}


def _load_indices(cfg: RunConfig, entries) -> dict[str, tissue.PatchIndex]:
    indices = {}
    for e in entries:
        path = _require_file(cfg.workdir / f"{e.slide_id}.index.csv",
                             f"patch index for {e.slide_id}")
        indices[e.slide_id] = tissue.load_index(path, cfg.patch_size,
                                                slide_id=e.slide_id, level=cfg.level)
    return indices


def _parse_seed_range(text: str) -> list[int]:
    try:
        if ".." in text:
            lo, hi = text.split("..")
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(text)]
    except ValueError:
        raise ConfigError("(seeds)", f"expected 'a..b' or a single integer, got {text!r}") \
            from None
    if not seeds:
        raise ConfigError("(seeds)", f"empty seed range {text!r}")
    return seeds


def split_counts(n: int) -> tuple[int, int, int]:
    """70/15/15 split by count; rounding leftovers go to train."""
    val = int(n * 0.15)
    test = int(n * 0.15)
    return n - val - test, val, test


def cmd_generate(args) -> int:
    cfg = _load_run_config(args)
    seeds = _parse_seed_range(args.seeds)
    out = Path(args.out) if args.out else cfg.workdir
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        print(f"error: output directory not writable: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    gen = cfg.generate
    spec = synthetic.SlideSpec(
        width=gen["width"], height=gen["height"], tile_size=gen["tile_size"],
        tissue_blobs=tuple(gen["tissue_blobs"]),
        tumour_blobs=tuple(gen["tumour_blobs"]),
        noise_amplitude=gen["noise_amplitude"])

    entries = []
    for seed in seeds:
        slide_id = f"slide_{seed:04d}"
        image, truth, grade = synthetic.generate_synthetic_slide(seed, spec)
        image_path = out / f"{slide_id}.hpyr"
        mask_path = out / f"{slide_id}.truth.hpyr"
        pyramid.write_file(image, image_path)
        pyramid.write_file(truth, mask_path)
        entries.append((slide_id, image_path, mask_path, grade))
        _say(args, f"generated {slide_id} (grade {grade})")

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5911]))
    order = rng.permutation(len(entries))
    n_train, n_val, n_test = split_counts(len(entries))
    splits = {}
    for rank, idx in enumerate(order):
        if rank < n_train:
            splits[idx] = "train"
        elif rank < n_train + n_val:
            splits[idx] = "validation"
        else:
            splits[idx] = "test"
    manifest = pyramid.SlideManifest([
        pyramid.ManifestEntry(slide_id, image_path, mask_path, grade, splits[i])
        for i, (slide_id, image_path, mask_path, grade) in enumerate(entries)])
    pyramid.save_manifest(manifest, out / "manifest.json")
    _say(args, f"wrote {len(entries)} slides and manifest.json to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _load_run_config(args)
    manifest = pyramid.load_manifest(_require_file(cfg.manifest_path, "manifest"))
    for entry in manifest.entries:
        image = pyramid.read_file(entry.image_path)
        truth = pyramid.read_file(entry.mask_path)
        index = tissue.build_patch_index(image, truth, entry.slide_id,
                                         cfg.level, cfg.patch_size)
        tissue.save_index(index, cfg.workdir / f"{entry.slide_id}.index.csv")
        _say(args, f"{entry.slide_id}: {len(index)} patches "
                   f"({index.count(tissue.PatchLabel.TUMOUR)} tumour)")
    return EXIT_OK


def cmd_fit_cluster(args) -> int:
    cfg = _load_run_config(args)
    manifest = pyramid.load_manifest(_require_file(cfg.manifest_path, "manifest"))
    entries = manifest.for_split("train")
    indices = _load_indices(cfg, entries)
    tree = sampler.build_tree(manifest, indices, "train")
    pyramids = _load_pyramids(cfg, manifest, entries)
    spec = cfg.batch_spec(batch_size=cfg.cluster["fit_batch_size"])
    batches = cfg.scaled(cfg.cluster["fit_batches"])
    rows = []
    with sampler.BatchStream(tree, pyramids, spec, batches_per_epoch=batches,
                             patch_size=cfg.patch_size, epochs=1,
                             stream_id=10, quiet=True) as stream:
        for batch in stream:
            rows.append(batch.inputs)
    samples = np.vstack(rows)
    model = cluster_mod.fit(samples, cfg.cluster["variance_target"],
                            cfg.cluster["k"], seed=cfg.seed)
    cluster_mod.save_cluster_model(model, cfg.workdir / "cluster.json")
    _say(args, f"fit clusters on {samples.shape[0]} samples: "
               f"{model.projected_dim} components, "
               f"explained {model.explained_ratio:.4f}")
    return EXIT_OK


def cmd_train_patch(args) -> int:
    cfg = _load_run_config(args)
    manifest = pyramid.load_manifest(_require_file(cfg.manifest_path, "manifest"))
    loss = cfg.train["loss"]
    cluster_model = None
    if loss == "cwce":
        path = _require_file(cfg.workdir / "cluster.json",
                             "cluster model (required for cwce loss)")
        cluster_model = cluster_mod.load_cluster_model(path)

    spec = cfg.batch_spec()
    trees, pyramids = {}, {}
    for split in ("train", "validation"):
        entries = manifest.for_split(split)
        indices = _load_indices(cfg, entries)
        trees[split] = sampler.build_tree(manifest, indices, split)
        pyramids[split] = _load_pyramids(cfg, manifest, entries)

    model = learn.PatchClassifier(cluster_mod.FEATURE_DIM, sampler.CLASS_COUNT,
                                  hidden=cfg.train["hidden"], seed=cfg.seed)
    with sampler.BatchStream(trees["train"], pyramids["train"], spec,
                             batches_per_epoch=spec.train_batches,
                             patch_size=cfg.patch_size,
                             cluster_model=cluster_model, stream_id=1,
                             quiet=args.quiet) as train_stream, \
         sampler.BatchStream(trees["validation"], pyramids["validation"], spec,
                             batches_per_epoch=spec.val_batches,
                             patch_size=cfg.patch_size,
                             cluster_model=cluster_model, stream_id=2,
                             quiet=True) as val_stream:
        history = learn.train(
            model, iter(train_stream), iter(val_stream),
            batches_per_epoch=spec.train_batches,
            val_batches_per_epoch=spec.val_batches,
            epochs=cfg.train["epochs"], lr=cfg.train["lr"],
            accumulation_steps=cfg.train["accumulation"],
            patience=cfg.train["patience"], loss=loss)
    learn.save_classifier(model, cfg.workdir / "classifier.json",
                          loss=loss, seed=cfg.seed)
    learn.save_history(history, cfg.workdir / "history.csv")
    _say(args, f"trained {len(history.epochs)} epochs, "
               f"best val loss {min(history.val_loss):.6f}"
               f"{' (early stop)' if history.stopped_early else ''}")
    return EXIT_OK


def _make_predictor(model: learn.PatchClassifier):
    def predict(patch: np.ndarray) -> float:
        features = cluster_mod.extract_features(patch)
        return float(learn.forward(model, features)[0, 1])
    return predict


def cmd_infer(args) -> int:
    cfg = _load_run_config(args)
    manifest = pyramid.load_manifest(_require_file(cfg.manifest_path, "manifest"))
    model, _ = learn.load_classifier(
        _require_file(cfg.workdir / "classifier.json", "classifier checkpoint"))
    predict = _make_predictor(model)
    workers = cfg.raw["sampler"]["workers"]
    for entry in manifest.entries:
        index = _load_indices(cfg, [entry])[entry.slide_id]
        pyr = pyramid.read_file(entry.image_path)
        hm = heatmap_mod.infer_slide(pyr, index, predict, workers=workers)
        save_pfm(hm.values, cfg.workdir / f"{entry.slide_id}.heat.pfm")
        _say(args, f"{entry.slide_id}: heatmap {hm.width}x{hm.height}, "
                   f"max {hm.values.max():.3f}")
    return EXIT_OK


def _load_heatmap(cfg: RunConfig, slide_id: str) -> heatmap_mod.Heatmap:
    path = _require_file(cfg.workdir / f"{slide_id}.heat.pfm",
                         f"heatmap for {slide_id}")
    return heatmap_mod.Heatmap(load_pfm(path).astype(np.float64),
                               cfg.level, cfg.patch_size)


def _truth_1024(entry: pyramid.ManifestEntry) -> np.ndarray:
    truth = pyramid.read_file(entry.mask_path)
    base = truth.level_array(0)[:, :, 0].astype(np.float64) / 255.0
    resized = heatmap_mod.area_resize(base, heatmap_mod.REFINED_SIZE,
                                      heatmap_mod.REFINED_SIZE)
    return resized > 0.5


def _fused_input(cfg: RunConfig, entry: pyramid.ManifestEntry) -> np.ndarray:
    pyr = pyramid.read_file(entry.image_path)
    hm = _load_heatmap(cfg, entry.slide_id)
    return heatmap_mod.fuse(pyr, hm)


def cmd_refine_train(args) -> int:
    cfg = _load_run_config(args)
    manifest = pyramid.load_manifest(_require_file(cfg.manifest_path, "manifest"))
    pairs = [( _fused_input(cfg, e), _truth_1024(e))
             for e in manifest.for_split("train")]
    val_pairs = [(_fused_input(cfg, e), _truth_1024(e))
                 for e in manifest.for_split("validation")]
    model = heatmap_mod.train_refiner(
        pairs, radius=cfg.refine["radius"], lr=cfg.refine["lr"],
        steps=cfg.refine["steps"],
        samples_per_image=cfg.refine["samples_per_image"],
        seed=cfg.seed, val_pairs=val_pairs)
    if cfg.refine["executor"]:
        model.executor_command = list(cfg.refine["executor"])
    heatmap_mod.save_refiner(model, cfg.workdir / "refiner.json")
    val_note = f", val loss {model.validation_loss:.6f}" if model.validation_loss else ""
    _say(args, f"trained refiner on {len(pairs)} slides{val_note}")
    return EXIT_OK


def cmd_refine(args) -> int:
    cfg = _load_run_config(args)
    manifest = pyramid.load_manifest(_require_file(cfg.manifest_path, "manifest"))
    model = heatmap_mod.load_refiner(
        _require_file(cfg.workdir / "refiner.json", "refiner checkpoint"))
    if cfg.refine["executor"]:
        model.executor_command = list(cfg.refine["executor"])
    threshold = cfg.eval["threshold"]
    for entry in manifest.entries:
        fused = _fused_input(cfg, entry)
        prob = heatmap_mod.refine(fused, model)
        mask = heatmap_mod.threshold_mask(prob, threshold)
        save_pgm(mask, cfg.workdir / f"{entry.slide_id}.mask.pgm")
        _say(args, f"{entry.slide_id}: refined mask, "
                   f"{int(mask.sum())} tumour pixels")
    return EXIT_OK


def _otsu_design_mask(entry: pyramid.ManifestEntry) -> np.ndarray:
    """Baseline: everything Otsu calls tissue is predicted tumour."""
    pyr = pyramid.read_file(entry.image_path)
    level = heatmap_mod.lowres_level(pyr)
    rgb = pyr.level_array(level).astype(np.float64)
    resized = heatmap_mod.bilinear_resize(rgb, heatmap_mod.REFINED_SIZE,
                                          heatmap_mod.REFINED_SIZE)
    quantized = np.clip(np.floor(resized + 0.5), 0, 255).astype(np.uint8)
    return tissue.tissue_mask(quantized).bits


def cmd_evaluate(args) -> int:
    cfg = _load_run_config(args)
    manifest = pyramid.load_manifest(_require_file(cfg.manifest_path, "manifest"))
    entries = manifest.for_split(cfg.eval["split"])
    if not entries:
        raise MissingPrerequisite(f"no slides in split {cfg.eval['split']!r}")
    threshold = cfg.eval["threshold"]

    designs = {"otsu": True}
    designs["patchwise"] = all(
        (cfg.workdir / f"{e.slide_id}.heat.pfm").exists() for e in entries)
    designs["refined"] = all(
        (cfg.workdir / f"{e.slide_id}.mask.pgm").exists() for e in entries)

    reports = []
    for design in ("otsu", "patchwise", "refined"):
        if not designs[design]:
            continue
        scores = []
        for entry in entries:
            truth = _truth_1024(entry)
            if design == "otsu":
                pred = _otsu_design_mask(entry)
            elif design == "patchwise":
                hm = _load_heatmap(cfg, entry.slide_id)
                pred = heatmap_mod.upsampled_heatmap_mask(hm, threshold)
            else:
                pred = load_pgm(cfg.workdir / f"{entry.slide_id}.mask.pgm")
            scores.append(eval_mod.score_slide(entry.slide_id, entry.grade,
                                               pred, truth))
        report = eval_mod.aggregate(scores, design)
        reports.append(report)
        eval_mod.save_report_csv(report, cfg.workdir / f"report_{design}.csv")
        overall = report.overall
        _say(args, f"{design}: dsc {overall['dsc'].mean:.3f} +/- {overall['dsc'].std:.3f}"
                   f", precision {overall['precision'].mean:.3f}"
                   f", recall {overall['recall'].mean:.3f}"
                   f" ({len(report.scores)} slides)")
    eval_mod.save_report_json(reports, cfg.workdir / "report.json")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_run_config(args)
    manifest = pyramid.load_manifest(_require_file(cfg.manifest_path, "manifest"))
    model, _ = learn.load_classifier(
        _require_file(cfg.workdir / "classifier.json", "classifier checkpoint"))
    refiner = heatmap_mod.load_refiner(
        _require_file(cfg.workdir / "refiner.json", "refiner checkpoint"))
    entries = manifest.for_split(cfg.eval["split"]) or manifest.entries
    entry = entries[0]
    if args.slide:
        by_id = manifest.by_id()
        if args.slide not in by_id:
            raise MissingPrerequisite(f"slide {args.slide!r} not in manifest")
        entry = by_id[args.slide]

    image = pyramid.read_file(entry.image_path)
    truth = pyramid.read_file(entry.mask_path)
    predict = _make_predictor(model)
    state: dict = {}

    def patch_stage():
        index = tissue.build_patch_index(image, truth, entry.slide_id,
                                         cfg.level, cfg.patch_size)
        state["heatmap"] = heatmap_mod.infer_slide(image, index, predict)

    def refine_stage():
        fused = heatmap_mod.fuse(image, state["heatmap"])
        prob = heatmap_mod.refine(fused, refiner)
        state["mask"] = heatmap_mod.threshold_mask(prob, cfg.eval["threshold"])

    result = eval_mod.benchmark({"patch-wise": patch_stage,
                                 "refinement": refine_stage},
                                repetitions=args.repetitions)
    fraction = result.fraction("refinement")
    for name, timing in result.stages.items():
        _say(args, f"{name}: {timing.mean:.3f} +/- {timing.std:.3f} s")
    _say(args, f"total: {result.total.mean:.3f} +/- {result.total.std:.3f} s")
    _say(args, f"refinement fraction: {fraction:.4f}")
    doc = {
        "slide_id": entry.slide_id,
        "repetitions": result.repetitions,
        "stages": {name: {"mean": t.mean, "std": t.std}
                   for name, t in result.stages.items()},
        "total": {"mean": result.total.mean, "std": result.total.std},
        "refinement_fraction": fraction,
    }
    (cfg.workdir / "bench.json").write_text(json.dumps(doc, indent=2,
                                                       sort_keys=True) + "\n")
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="JSON config path")
    p.add_argument("--workdir", default=None, help="working directory")
    p.add_argument("--seed", type=int, default=None, help="seed override")
    p.add_argument("--workers", type=int, default=None, help="worker count override")
    p.add_argument("--quiet", action="store_true", help="suppress progress output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="histoseg",
        description="Cascaded two-stage tumour segmentation on tiled slides.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render synthetic slides and a manifest")
    p.add_argument("--seeds", required=True, help="seed range, e.g. 1..20")
    p.add_argument("--out", default=None, help="output directory (default workdir)")
    p.set_defaults(func=cmd_generate)

    for name, func, help_text in [
        ("preprocess", cmd_preprocess, "build per-slide patch indices"),
        ("fit-cluster", cmd_fit_cluster, "fit the frozen clustering pipeline"),
        ("train-patch", cmd_train_patch, "train the patch classifier"),
        ("infer", cmd_infer, "stitch per-slide heatmaps"),
        ("refine-train", cmd_refine_train, "train the refinement model"),
        ("refine", cmd_refine, "produce refined segmentation masks"),
        ("evaluate", cmd_evaluate, "score designs against ground truth"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)

    p = sub.add_parser("bench", help="time the pipeline stages on one slide")
    p.add_argument("--slide", default=None, help="slide id (default: first eval slide)")
    p.add_argument("--repetitions", type=int, default=10)
    p.set_defaults(func=cmd_bench)

    for p in sub.choices.values():
        _add_common(p)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
