"""
Command handlers του CLI.

Κάθε handler παίρνει τα parsed args και ένα RunContext, κάνει τη δουλειά
του και επιστρέφει exit code. Τα exceptions γίνονται exit codes στο execute():
0 success, 1 runtime, 2 config, 3 backend.

Κάθε εντολή που γράφει αποτελέσματα γράφει και ένα manifest.json στο --out:
config, config hash, seeds και sha256 των inputs. Χωρίς timestamps, ώστε
το ίδιο run να δίνει ίδια bytes.
"""

import hashlib
import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError
from sqlalchemy.exc import SQLAlchemyError

from . import __version__
from .analysis_service import (
    MIN_TSNE_POINTS,
    drops_by_patch,
    embedding_points,
    extract_features,
    histogram_grid,
    make_extractor,
    optimized_patches,
    source_stats,
    tsne_embed,
)
from .database import get_db
from .dataset_parser import AnnotatedDataset, load_dataset, load_dataset_file, prepare_samples
from .detector_service import AdapterRegistry, DetectorAdapter, is_toy_entry, list_adapters, load_adapter, load_registry, toy_spec_from_entry
from .errors import (
    AnnotationParseError,
    BackendUnavailableError,
    ConfigError,
    InvalidArgumentError,
    PatchBenchError,
    PatchFormatError,
)
from .evaluation_service import (
    baseline_columns,
    compatibility_matrix,
    dataset_map,
    evaluate_patch_set,
    group_patch_sets,
    read_eval_records,
    write_eval_records,
)
from .models import Run
from .patch_core import Patch, load_patch_dir, save_patch
from .report_service import render_heatmap, render_histograms, render_stats_table, render_tsne
from .schemas import RunConfig
from .setup_check import run_checks
from .training_service import train_patch_set

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_BACKEND = 3

# Όρια του history -n
HISTORY_MIN = 1
HISTORY_MAX = 100

CONFIG_ERRORS = (
    ConfigError,
    InvalidArgumentError,
    FileNotFoundError,
    ValidationError,
    PatchFormatError,
    AnnotationParseError,
)


@dataclass
class RunContext:
    """Ό,τι μαθαίνουμε κατά το run και γράφεται στο history."""

    command: str
    config_hash: Optional[str] = None
    out_dir: Optional[str] = None


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, BackendUnavailableError):
        return EXIT_BACKEND
    if isinstance(error, CONFIG_ERRORS):
        return EXIT_CONFIG
    return EXIT_RUNTIME


def record_run(ctx: RunContext, exit_code: int, started_at: datetime) -> None:
    """Μία γραμμή στο runs. Αν η βάση δεν είναι διαθέσιμη, μόνο warning."""
    try:
        with get_db() as db:
            db.add(
                Run(
                    command=ctx.command,
                    config_hash=ctx.config_hash,
                    out_dir=ctx.out_dir,
                    status="ok" if exit_code == EXIT_OK else "failed",
                    exit_code=exit_code,
                    started_at=started_at,
                    finished_at=datetime.now(timezone.utc),
                )
            )
    except (SQLAlchemyError, OSError) as e:
        logger.warning(f"⚠️  Could not record run in history: {e}")


def execute(args) -> int:
    """Τρέχει τον handler των args και μεταφράζει exceptions σε exit codes."""
    ctx = RunContext(command=args.command)
    started_at = datetime.now(timezone.utc)
    try:
        code = args.handler(args, ctx)
    except Exception as e:
        code = exit_code_for(e)
        logger.error(f"❌ {ctx.command} failed: {e}")
        logger.debug("Traceback:", exc_info=True)
    record_run(ctx, code, started_at)
    return code


# ============================================================
# Config
# ============================================================

def _deep_merge(base: dict, overrides: dict) -> dict:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def read_config_file(path: Path) -> dict:
    """
    Διαβάζει TOML run config ή ένα manifest.json από προηγούμενο run.

    Σε TOML τα σχετικά paths του registry και του data λύνονται ως προς τον
    φάκελο του αρχείου. Σε manifest μένουν όπως γράφτηκαν.
    """
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    try:
        if path.suffix == ".json":
            document = json.loads(path.read_text(encoding="utf-8"))
            return document.get("config", document)
        with open(path, "rb") as f:
            document = tomllib.load(f)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: cannot parse config ({e})") from e

    for key in ("registry", "data"):
        value = document.get(key)
        if value is not None and not Path(value).is_absolute():
            document[key] = str(path.parent / value)
    return document


def _flag_overrides(args) -> dict:
    overrides: dict = {}

    def put(keys: Sequence[str], value) -> None:
        if value is None:
            return
        node = overrides
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = value

    def flag(name: str):
        return getattr(args, name, None)

    put(["registry"], flag("registry"))
    put(["data"], flag("data"))
    put(["out"], flag("out"))
    put(["seed"], flag("seed"))
    put(["jobs"], flag("jobs"))
    put(["train", "epochs"], flag("epochs"))
    put(["train", "weights", "lambda_s"], flag("lambda_s"))
    put(["train", "weights", "lambda_v"], flag("lambda_v"))
    put(["train", "weights", "lambda_m"], flag("lambda_m"))
    put(["train", "target_class"], flag("target_class_only"))
    put(["train", "placement_scale"], flag("placement_scale"))
    put(["eval", "placement_scale"], flag("placement_scale"))
    put(["train", "patch_size"], flag("patch_size"))
    put(["eval", "patch_size"], flag("patch_size"))
    put(["eval", "gray_levels"], flag("gray_levels"))
    put(["eval", "noise_count"], flag("noise_count"))
    put(["eval", "conf_thresh"], flag("conf"))
    put(["eval", "iou_thresh"], flag("iou"))
    put(["analysis", "perplexity"], flag("perplexity"))
    put(["analysis", "extractor"], flag("extractor"))
    return overrides


def load_run_config(args) -> RunConfig:
    """Config file (αν δόθηκε) και από πάνω τα CLI flags."""
    config_path = getattr(args, "config", None)
    document = read_config_file(Path(config_path)) if config_path else {}
    config = RunConfig.model_validate(_deep_merge(document, _flag_overrides(args)))
    for name in ("registry", "data"):
        path = getattr(config, name)
        if path is not None and not path.exists():
            raise FileNotFoundError(f"{name} file not found: {path}")
    return config


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _begin(args, ctx: RunContext) -> RunConfig:
    config = load_run_config(args)
    ctx.config_hash = config_hash(config)
    ctx.out_dir = str(config.out)
    return config


# ============================================================
# Inputs και manifest
# ============================================================

def digest_path(path: Path) -> str:
    """sha256 ενός αρχείου ή όλων των αρχείων ενός φακέλου (ταξινομημένα)."""
    digest = hashlib.sha256()
    if path.is_dir():
        for item in sorted(p for p in path.rglob("*") if p.is_file()):
            digest.update(item.relative_to(path).as_posix().encode("utf-8"))
            digest.update(item.read_bytes())
    else:
        digest.update(path.read_bytes())
    return digest.hexdigest()


def write_run_manifest(
    out: Path,
    command: str,
    config: RunConfig,
    inputs: Dict[str, Optional[Path]],
    extra: Optional[dict] = None,
) -> Path:
    manifest = {
        "patchbench_version": __version__,
        "command": command,
        "config": config.model_dump(mode="json"),
        "config_hash": config_hash(config),
        "seeds": {
            "global": config.seed,
            "train": config.train.seed,
            "noise": config.eval.noise_seed,
            "analysis": config.analysis.seed,
        },
        "inputs": {name: digest_path(path) for name, path in sorted(inputs.items()) if path is not None},
        **(extra or {}),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"💾 Manifest saved to {path}")
    return path


def resolve_dataset(config: RunConfig, registry: AdapterRegistry, adapter_names: Iterable[str]) -> AnnotatedDataset:
    """
    Φορτώνει το --data.

    Ένα synthetic dataset παίρνει τα templates των template_adapters του. Αν
    δεν ορίζονται, τα templates των toy adapters που συμμετέχουν στο run.
    """
    if config.data is None:
        raise ConfigError("--data is required")
    spec = load_dataset_file(config.data)
    templates = None
    if spec.kind == "synthetic":
        if spec.template_adapters:
            templates = [toy_spec_from_entry(registry.get(name)) for name in spec.template_adapters]
        else:
            entries = [registry.entries[n] for n in dict.fromkeys(adapter_names) if n in registry.entries]
            templates = [toy_spec_from_entry(e) for e in entries if is_toy_entry(e)] or None
    dataset = load_dataset(spec, templates)
    logger.info(f"📥 Dataset '{dataset.id}': {len(dataset)} images, {dataset.num_boxes} boxes")
    return dataset


def load_patch_dirs(directories: Sequence[str]) -> List[Patch]:
    patches: List[Patch] = []
    for directory in directories:
        found = load_patch_dir(directory)
        if not found:
            raise InvalidArgumentError(f"no patches found in {directory}")
        patches.extend(found)
    return patches


def _prepare_out(config: RunConfig) -> Path:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _patch_inputs(directories: Sequence[str]) -> Dict[str, Path]:
    return {f"patches[{i}]": Path(d) for i, d in enumerate(directories)}


# ============================================================
# Commands
# ============================================================

def cmd_train(args, ctx: RunContext) -> int:
    """Εκπαιδεύει --count patches απέναντι στο --adapter."""
    config = _begin(args, ctx)
    registry = load_registry(config.registry)
    adapter = load_adapter(args.adapter, registry)
    dataset = resolve_dataset(config, registry, [adapter.name])

    out = _prepare_out(config)
    patch_dir = out / "patches"
    patch_dir.mkdir(exist_ok=True)
    log_dir = out / "logs"
    log_dir.mkdir(exist_ok=True)
    checkpoint_dir = None
    if config.train.checkpoint_every:
        checkpoint_dir = out / "checkpoints"
        checkpoint_dir.mkdir(exist_ok=True)

    fingerprint = adapter.fingerprint()
    patches = train_patch_set(adapter, dataset, config.train, args.count, config.jobs, log_dir, checkpoint_dir)
    for patch in patches:
        save_patch(patch, patch_dir / patch.patch_id)
    if adapter.fingerprint() != fingerprint:
        raise PatchBenchError(f"weights of '{adapter.name}' changed during training")

    write_run_manifest(
        out,
        "train",
        config,
        {"data": config.data, "registry": config.registry},
        {"adapter": adapter.name, "adapter_fingerprint": fingerprint, "patch_ids": [p.patch_id for p in patches]},
    )
    logger.info(f"✅ Trained {len(patches)} patches against '{adapter.name}' into {patch_dir}")
    return EXIT_OK


def cmd_eval(args, ctx: RunContext) -> int:
    """
    Clean vs patched mAP για κάθε patch set των --patches.

    Χωρίς --patches αξιολογούνται τα γκρι baselines των --gray-levels.
    """
    config = _begin(args, ctx)
    registry = load_registry(config.registry)
    adapter = load_adapter(args.adapter, registry)
    dataset = resolve_dataset(config, registry, [adapter.name])

    if args.patches:
        patch_sets = group_patch_sets(load_patch_dirs(args.patches))
    else:
        patch_sets = {k: v for k, v in baseline_columns(config.eval).items() if k.startswith("gray")}

    records = _evaluate_sets(adapter, dataset, patch_sets, config)
    out = _prepare_out(config)
    write_eval_records(records, out / "eval.jsonl")
    write_run_manifest(out, "eval", config, {"data": config.data, "registry": config.registry, **_patch_inputs(args.patches or [])})
    for record in records:
        logger.info(f"✅ {record.model} / {record.patch_set_id}: drop {record.map_drop:.4f} (clean {record.map_clean:.4f})")
    return EXIT_OK


def _evaluate_sets(adapter: DetectorAdapter, dataset: AnnotatedDataset, patch_sets: Dict[str, List[Patch]], config: RunConfig):
    samples = prepare_samples(dataset, adapter.input_size)
    clean = dataset_map(adapter, samples, config.eval)
    return [
        evaluate_patch_set(adapter, dataset, patches, params=config.eval, patch_set_id=label, samples=samples, clean=clean)
        for label, patches in patch_sets.items()
    ]


def cmd_matrix(args, ctx: RunContext) -> int:
    """
    Compatibility matrix: evaluators × (baselines + sources).

    Evaluators που δεν φορτώνονται γίνονται γραμμές με missing κελιά.
    """
    config = _begin(args, ctx)
    registry = load_registry(config.registry)

    patches = load_patch_dirs(args.patches)
    sources = group_patch_sets(optimized_patches(patches))
    if not sources:
        raise InvalidArgumentError("no optimized patches found; baselines are added automatically")
    skipped = len(patches) - sum(len(v) for v in sources.values())
    if skipped:
        logger.warning(f"⚠️  Ignoring {skipped} baseline patches in --patches")

    evaluators = list(dict.fromkeys(args.adapter or sources))
    adapters: Dict[str, Optional[DetectorAdapter]] = {}
    for name in evaluators:
        try:
            adapters[name] = load_adapter(name, registry)
        except (ConfigError, BackendUnavailableError) as e:
            logger.warning(f"⚠️  Skipping evaluator '{name}': {e}")
            adapters[name] = None

    dataset = resolve_dataset(config, registry, evaluators)
    matrix = compatibility_matrix(sources, adapters, dataset, config.eval, config.jobs)
    if all(v is None for row in matrix.cells for v in row):
        raise PatchBenchError("every cell of the compatibility matrix failed")

    out = _prepare_out(config)
    render_heatmap(matrix, out / "matrix.png", title=f"mAP drop on {dataset.id}")
    write_eval_records(matrix.records, out / "matrix.records.jsonl")
    write_run_manifest(
        out,
        "matrix",
        config,
        {"data": config.data, "registry": config.registry, **_patch_inputs(args.patches)},
        {"evaluators": evaluators, "sources": list(sources), "failures": matrix.failures},
    )
    if matrix.failures:
        logger.warning(f"⚠️  Matrix finished with {len(matrix.failures)} failures")
    logger.info(f"✅ Matrix {len(matrix.eval_labels)}×{len(matrix.labels)} saved to {out}")
    return EXIT_OK


def cmd_analyze_tsne(args, ctx: RunContext) -> int:
    """t-SNE των patches, με μέγεθος σημείου το mAP drop από τα --records."""
    config = _begin(args, ctx)
    patches = load_patch_dirs(args.patches)
    n = len(patches)
    if n < MIN_TSNE_POINTS:
        raise InvalidArgumentError(f"t-SNE needs at least {MIN_TSNE_POINTS} patches, got {n}")

    params = config.analysis
    perplexity = params.perplexity
    limit = (n - 1) / 3
    if perplexity >= limit:
        perplexity = float(np.nextafter(limit, 0.0))
        logger.warning(f"⚠️  Perplexity {params.perplexity:g} is too large for {n} patches, using {perplexity:.4f}")

    records = [r for path in (args.records or []) for r in read_eval_records(path)]
    extractor = make_extractor(params)
    features = [extract_features(extractor, p) for p in patches]
    coords = tsne_embed(features, perplexity=perplexity, seed=params.seed, iterations=params.iterations)
    points = embedding_points(patches, coords, drops_by_patch(records))

    out = _prepare_out(config)
    render_tsne(points, out / "tsne.png", min_marker=params.min_marker, max_marker=params.max_marker)
    inputs = {**_patch_inputs(args.patches), **{f"records[{i}]": Path(p) for i, p in enumerate(args.records or [])}}
    write_run_manifest(out, "analyze tsne", config, inputs, {"extractor": extractor.extractor_id, "perplexity": perplexity})
    logger.info(f"✅ Embedded {n} patches with {extractor.extractor_id}")
    return EXIT_OK


def cmd_analyze_hist(args, ctx: RunContext) -> int:
    """3×3 histogram grids (RGB και HSV) και ο πίνακας στατιστικών ανά source."""
    config = _begin(args, ctx)
    patches = optimized_patches(load_patch_dirs(args.patches))
    if not patches:
        raise InvalidArgumentError("histogram analysis needs optimized patches")

    out = _prepare_out(config)
    stats = []
    for space in args.space:
        panels = histogram_grid(patches, space, single=args.single, source=args.source)
        render_histograms(panels, out / f"hist_{space.lower()}.png", space)
        stats.extend(source_stats(patches, space))
    render_stats_table(stats, out / "stats.csv")
    write_run_manifest(out, "analyze hist", config, _patch_inputs(args.patches), {"spaces": list(args.space)})
    logger.info(f"✅ Histograms for {len(patches)} patches saved to {out}")
    return EXIT_OK


def cmd_baseline(args, ctx: RunContext) -> int:
    """Γράφει τα baseline patches (γκρι επίπεδα και noise) στο --out/patches."""
    config = _begin(args, ctx)
    out = _prepare_out(config)
    patch_dir = out / "patches"
    patch_dir.mkdir(exist_ok=True)

    written = 0
    for patches in baseline_columns(config.eval).values():
        for patch in patches:
            save_patch(patch, patch_dir / patch.patch_id)
            written += 1
    write_run_manifest(out, "baseline", config, {})
    logger.info(f"✅ Wrote {written} baseline patches to {patch_dir}")
    return EXIT_OK


def cmd_adapters(args, ctx: RunContext) -> int:
    registry = load_registry(getattr(args, "registry", None))
    for name, group, weights_id in list_adapters(registry):
        print(f"{name:<20} {group.value:<14} {weights_id}")
    return EXIT_OK


def cmd_history(args, ctx: RunContext) -> int:
    """Τα N πιο πρόσφατα runs, νεότερα πρώτα."""
    n = args.n
    if not HISTORY_MIN <= n <= HISTORY_MAX:
        raise InvalidArgumentError(f"-n must be between {HISTORY_MIN} and {HISTORY_MAX}, got {n}")
    with get_db() as db:
        runs = db.query(Run).order_by(Run.id.desc()).limit(n).all()
        for run in runs:
            started = run.started_at.strftime("%Y-%m-%d %H:%M:%S") if run.started_at else "-"
            print(f"{run.id:>5}  {started}  {run.command:<14} exit={run.exit_code}  {run.out_dir or '-'}")
    return EXIT_OK


def cmd_check(args, ctx: RunContext) -> int:
    return EXIT_OK if run_checks(getattr(args, "registry", None)) else EXIT_RUNTIME
