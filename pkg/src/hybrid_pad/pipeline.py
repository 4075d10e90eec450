"""Orchestration of the train / infer / eval / bench / synth / sweep commands."""
import json
import logging
import os
import platform
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from rich.console import Console

from hybrid_pad.core.analysis.sweep import DEFAULT_FRACTIONS, SweepAnalyzer, SweepRun
from hybrid_pad.core.anomaly.export import export_anomaly_map, load_anomaly_map
from hybrid_pad.core.anomaly.features import extract_features, extract_features_for
from hybrid_pad.core.anomaly.scoring import (
    AnomalyMap,
    compute_anomaly_map,
    normalize_anomaly_maps,
    resize_mask,
)
from hybrid_pad.core.config import RunConfig
from hybrid_pad.core.data.bundle import ModelBundle, load_bundle, save_bundle
from hybrid_pad.core.data.scene_loader import (
    load_mad_scene,
    load_query_set,
    reference_pairs,
    subsample_references,
    write_scene_directory,
)
from hybrid_pad.core.data.synthetic import generate_synthetic_scene
from hybrid_pad.core.errors import (
    HybridPadError,
    LocalizationError,
    MetricError,
    StageError,
)
from hybrid_pad.core.metrics.pro import aupro
from hybrid_pad.core.metrics.roc import auroc, pixel_auroc
from hybrid_pad.core.reporting.report_writer import ReportWriter, finite_or_none
from hybrid_pad.core.sfm.localization import localize_query_detailed
from hybrid_pad.core.sfm.retrieval import RetrievalDatabase
from hybrid_pad.core.sfm.triangulation import triangulate_reference_model
from hybrid_pad.core.splatting.rasterizer import rasterize
from hybrid_pad.core.splatting.trainer import mean_psnr, train
from hybrid_pad.core.types import ImageBuffer, Pose, QueryView, SceneBundle, StageTimings
from hybrid_pad.core.utils.cache import directory_hash
from hybrid_pad.core.utils.images import save_image
from hybrid_pad.core.utils.timing import StageTimer, timing_statistics
from hybrid_pad.core.validation.report_validator import ReportValidator

logger = logging.getLogger(__name__)

REPORT_FORMAT_VERSION = 1
REFERENCE_MS = {"localization_ms": 22.0, "nvs_ms": 9.8, "scoring_ms": 2.5, "total_ms": 34.0}
REFERENCE_NOTE = "published single-GPU figures, shown for comparison only"


@dataclass
class TrainSummary:
    object_id: str
    n_references: int
    n_points: int
    n_gaussians: int
    sfm_seconds: float
    train_seconds: float
    psnr: Optional[float]
    psnr_source: str


@dataclass(eq=False)
class QueryOutcome:
    image_id: str
    defect: str
    timings: StageTimings
    pose: Optional[Pose] = None
    reason: Optional[str] = None
    n_matches: int = 0
    n_inliers: int = 0
    pseudo_ref: Optional[ImageBuffer] = None
    raw_map: Optional[AnomalyMap] = None

    @property
    def localization_ok(self) -> bool:
        return self.pose is not None

    def report_entry(self, image_score: Optional[float]) -> Dict[str, Any]:
        return {
            "image_id": self.image_id,
            "defect": self.defect,
            "localization_ok": self.localization_ok,
            "reason": self.reason,
            "image_score": image_score,
            "pose": self.pose.as_dict() if self.pose is not None else None,
            "n_matches": self.n_matches,
            "n_inliers": self.n_inliers,
        }


def hardware_string() -> str:
    cpu = platform.processor() or platform.machine()
    return (
        f"{platform.platform()}; {cpu}; {os.cpu_count()} logical CPUs; "
        f"python {platform.python_version()}; torch {torch.__version__} ({torch.get_num_threads()} threads)"
    )


@contextmanager
def _stage(name: str, timer: Optional[StageTimer] = None) -> Iterator[None]:
    """Runs a pipeline stage; any failure is logged and re-raised as StageError(name)."""
    try:
        if timer is None:
            yield
        else:
            with timer.stage(name):
                yield
    except StageError:
        raise
    except Exception as e:
        logger.error(f"Stage '{name}' failed: {e}")
        raise StageError(name, e) from e


class InferenceEngine:
    """Localize -> render -> score for single queries over one immutable model bundle."""

    def __init__(self, bundle: ModelBundle, cfg: RunConfig):
        self.bundle = bundle
        self.cfg = cfg

    def process(self, query: QueryView) -> QueryOutcome:
        bundle, cfg = self.bundle, self.cfg
        timings = StageTimings()
        outcome = QueryOutcome(query.image_id, query.defect, timings)
        start = time.perf_counter_ns()

        with _stage("localize"):
            t0 = time.perf_counter_ns()
            try:
                located = localize_query_detailed(
                    query.image, bundle.sparse, bundle.retrieval, bundle.camera, bundle.sfm, cfg.seed, query.image_id
                )
            except LocalizationError as e:
                logger.warning(f"Query {query.image_id} not localized: {e}")
                outcome.reason = e.reason
                outcome.n_matches, outcome.n_inliers = e.n_matches, e.n_inliers
                located = None
            timings.localization_ms = (time.perf_counter_ns() - t0) / 1e6
        if located is None:
            timings.total_ms = (time.perf_counter_ns() - start) / 1e6
            return outcome
        outcome.pose = located.pose
        outcome.n_matches, outcome.n_inliers = located.n_correspondences, len(located.inliers)

        with _stage("render"):
            t0 = time.perf_counter_ns()
            outcome.pseudo_ref = rasterize(
                bundle.cloud, located.pose, bundle.camera, bundle.train.background, bundle.train.tile_size
            )
            timings.nvs_ms = (time.perf_counter_ns() - t0) / 1e6

        with _stage("score"):
            t0 = time.perf_counter_ns()
            anomaly = bundle.anomaly
            fq = extract_features_for(query.image_id, query.image, anomaly.feature_sidecar_dir, anomaly.blur_sigma)
            fr = extract_features(outcome.pseudo_ref, anomaly.blur_sigma)
            outcome.raw_map = compute_anomaly_map(query.image, outcome.pseudo_ref, fq, fr, anomaly)
            timings.scoring_ms = (time.perf_counter_ns() - t0) / 1e6

        timings.total_ms = (time.perf_counter_ns() - start) / 1e6
        logger.debug(
            f"{query.image_id}: localization {timings.localization_ms:.1f} ms, nvs {timings.nvs_ms:.1f} ms, "
            f"scoring {timings.scoring_ms:.1f} ms"
        )
        return outcome


def _metric(name: str, fn, *args) -> Optional[float]:
    try:
        return finite_or_none(fn(*args))
    except MetricError as e:
        logger.warning(f"{name} undefined: {e}")
        return None


class Pipeline:
    """High-level pipeline interface; configures torch threading for the duration of the context."""

    def __init__(self, cfg: RunConfig, console: Optional[Console] = None):
        self.cfg = cfg
        self.max_workers = cfg.threads or os.cpu_count() or 1
        self.console = console or Console()
        self.validator = ReportValidator()
        self._torch_state: Optional[Tuple[int, bool]] = None

    def __enter__(self) -> "Pipeline":
        self._torch_state = (torch.get_num_threads(), torch.are_deterministic_algorithms_enabled())
        if self.cfg.deterministic:
            torch.set_num_threads(1)
            torch.use_deterministic_algorithms(True)
        elif self.cfg.threads:
            torch.set_num_threads(self.cfg.threads)
        logger.debug(
            f"Pipeline: {self.max_workers} workers, torch threads {torch.get_num_threads()}, "
            f"deterministic {self.cfg.deterministic}"
        )
        return self

    def __exit__(self, exc_type: Optional[type], exc_val: Optional[Exception], exc_tb: Optional[type]) -> None:
        if self._torch_state is not None:
            threads, deterministic = self._torch_state
            torch.set_num_threads(threads)
            torch.use_deterministic_algorithms(deterministic)

    # train

    def cmd_train(self, scene_dir: Path, out_dir: Path) -> TrainSummary:
        timer = StageTimer()
        with _stage("load", timer):
            scene = load_mad_scene(scene_dir, self.max_workers)
        summary, _ = self.train_scene(scene, out_dir, self.cfg.seed, timer)
        self.console.print(
            f"[bold]{summary.object_id}[/bold]: SfM build {summary.sfm_seconds:.1f} s "
            f"({summary.n_points} points), 3DGS training {summary.train_seconds:.1f} s "
            f"({summary.n_gaussians} Gaussians), {summary.psnr_source} PSNR "
            + (f"{summary.psnr:.2f} dB" if summary.psnr is not None else "n/a")
        )
        return summary

    def train_scene(
        self, scene: SceneBundle, out_dir: Path, seed: int, timer: Optional[StageTimer] = None
    ) -> Tuple[TrainSummary, ModelBundle]:
        timer = timer or StageTimer()
        cfg = self.cfg
        with _stage("sfm", timer):
            db = RetrievalDatabase()
            sparse = triangulate_reference_model(scene.references, scene.camera, db, cfg.sfm, self.max_workers)

        held_out = [(q.image, q.pose) for q in scene.queries if q.pose is not None and not q.is_anomalous]
        with _stage("train", timer):
            result = train(reference_pairs(scene.references), sparse, scene.camera, cfg.train, seed, held_out or None)
            if result.psnr_log:
                psnr = result.psnr_log[-1][1]
            else:
                views = held_out or reference_pairs(scene.references)
                psnr = mean_psnr(result.cloud, views, scene.camera, cfg.train)

        bundle = ModelBundle(
            scene.object_id, scene.camera, sparse, db, result.cloud, cfg.train, cfg.sfm, cfg.anomaly
        )
        with _stage("save", timer):
            save_bundle(out_dir, bundle)
        logger.info(f"SfM build time: {timer.seconds('sfm'):.1f} s")
        logger.info(f"3DGS train time: {timer.seconds('train'):.1f} s")
        summary = TrainSummary(
            scene.object_id,
            len(scene.references),
            len(sparse),
            len(result.cloud),
            timer.seconds("sfm"),
            timer.seconds("train"),
            finite_or_none(psnr),
            result.psnr_source,
        )
        return summary, bundle

    # infer

    def _load_model_and_queries(self, model_dir: Path, query_dir: Path):
        with _stage("load"):
            bundle = load_bundle(model_dir)
            queries, unreadable = load_query_set(query_dir, strict=False, max_workers=self.max_workers)
        logger.info(f"{len(queries)} queries loaded, {len(unreadable)} unreadable")
        return bundle, queries, unreadable

    def run_queries(self, engine: InferenceEngine, queries: Sequence[QueryView]) -> List[QueryOutcome]:
        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            return list(executor.map(engine.process, queries))

    def cmd_infer(self, model_dir: Path, query_dir: Path, out_dir: Path) -> Dict[str, Any]:
        bundle, queries, unreadable = self._load_model_and_queries(model_dir, query_dir)
        report = self.infer_queries(bundle, queries, unreadable, out_dir)
        ReportWriter(out_dir, self.console).print_report("inference", report)
        return report

    def infer_queries(
        self,
        bundle: ModelBundle,
        queries: Sequence[QueryView],
        unreadable: Sequence[Tuple[str, str]],
        out_dir: Path,
    ) -> Dict[str, Any]:
        """Per-query outputs, then set-level normalization and the reports as a sequential join."""
        outcomes = self.run_queries(InferenceEngine(bundle, self.cfg), queries)
        anomaly = bundle.anomaly
        scored = [o for o in outcomes if o.raw_map is not None]
        normalized = dict(
            zip(
                (o.image_id for o in scored),
                normalize_anomaly_maps([o.raw_map for o in scored], anomaly.normalization),
            )
        )

        out_dir = Path(out_dir)
        for sub in ("maps", "pseudo_refs"):
            shutil.rmtree(out_dir / sub, ignore_errors=True)
            (out_dir / sub).mkdir(parents=True, exist_ok=True)
        entries = []
        for outcome in outcomes:
            anomaly_map = normalized.get(outcome.image_id)
            if anomaly_map is not None:
                export_anomaly_map(out_dir / "maps", outcome.image_id, anomaly_map, True)
                save_image(out_dir / "pseudo_refs" / f"{outcome.image_id}.png", outcome.pseudo_ref)
            entries.append(outcome.report_entry(anomaly_map.image_score if anomaly_map is not None else None))

        report = {
            "report": "inference",
            "format_version": REPORT_FORMAT_VERSION,
            "object_id": bundle.object_id,
            "normalization": anomaly.normalization,
            "map_size": anomaly.map_size,
            "queries": entries,
            "unreadable": [{"image_id": image_id, "reason": reason} for image_id, reason in unreadable],
        }
        timings = [{"image_id": o.image_id, **o.timings.as_dict()} for o in outcomes]
        writer = ReportWriter(out_dir, self.console)
        writer.write_report("inference", report)
        writer.write_report(
            "timings",
            {
                "report": "timings",
                "format_version": REPORT_FORMAT_VERSION,
                "queries": timings,
                "stages": timing_statistics(timings),
            },
        )
        localized = sum(o.localization_ok for o in outcomes)
        logger.info(f"Inference: {localized}/{len(outcomes)} queries localized")
        return report

    # eval

    def cmd_eval(
        self, pred_dirs: Sequence[Path], gt_dirs: Sequence[Path], out_dir: Optional[Path] = None
    ) -> Dict[str, Any]:
        if len(pred_dirs) != len(gt_dirs):
            mismatch = ValueError(f"{len(pred_dirs)} prediction dirs but {len(gt_dirs)} ground-truth dirs")
            raise StageError("eval", mismatch)
        objects = []
        for pred_dir, gt_dir in zip(pred_dirs, gt_dirs):
            with _stage("load"):
                inference = self._read_inference(Path(pred_dir))
                gt_queries, _ = load_query_set(Path(gt_dir), strict=False, max_workers=self.max_workers)
            with _stage("eval"):
                objects.append(self.evaluate_object(Path(pred_dir), inference, gt_queries))
        report = self.metrics_report(objects)
        writer = ReportWriter(Path(out_dir or pred_dirs[0]), self.console)
        writer.write_report("metrics", report)
        writer.print_report("metrics", report)
        return report

    def _read_inference(self, pred_dir: Path) -> Dict[str, Any]:
        path = pred_dir / "inference.json"
        if not path.exists():
            raise FileNotFoundError(f"No inference report in {pred_dir}")
        report = json.loads(path.read_text())
        self.validator.validate("inference", report)
        return report

    def evaluate_object(
        self, pred_dir: Path, inference: Dict[str, Any], gt_queries: Sequence[QueryView]
    ) -> Dict[str, Any]:
        """Image AUROC, pooled pixel AUROC and AUPRO for one inference run against its ground truth."""
        skipped = {u["image_id"] for u in inference["unreadable"]}
        gt = {q.image_id: q for q in gt_queries if q.image_id not in skipped}
        predicted = {q["image_id"]: q for q in inference["queries"]}
        unmatched = sorted(set(gt) ^ set(predicted))
        if unmatched:
            raise MetricError(f"Predictions and ground truth are not aligned; unmatched ids: {', '.join(unmatched)}")

        map_size = inference["map_size"]
        ids = sorted(predicted)
        ok = [i for i in ids if predicted[i]["localization_ok"]]
        failed = [i for i in ids if not predicted[i]["localization_ok"]]
        scores = [predicted[i]["image_score"] for i in ok]
        labels = [gt[i].is_anomalous for i in ok]
        if self.cfg.failure_policy == "max_score" and failed:
            top = max(scores, default=1.0)
            scores += [top] * len(failed)
            labels += [gt[i].is_anomalous for i in failed]

        maps = [load_anomaly_map(pred_dir / "maps" / f"{i}.png") for i in ok]
        masks = []
        for i in ok:
            mask = gt[i].mask
            if mask is None:
                mask = np.zeros((map_size, map_size), dtype=bool)
            masks.append(resize_mask(mask, map_size))

        result = {
            "object_id": inference["object_id"],
            "normalization": inference["normalization"],
            "image_auroc": _metric("image AUROC", auroc, scores, labels),
            "pixel_auroc": _metric("pixel AUROC", pixel_auroc, maps, masks),
            "aupro": _metric("AUPRO", aupro, maps, masks, self.cfg.fpr_limit),
            "n_queries": len(ids),
            "n_defective": sum(gt[i].is_anomalous for i in ids),
            "n_evaluated": len(ok),
            "n_localization_failures": len(failed),
            "localization_failures": failed,
        }
        logger.info(
            f"{result['object_id']}: image AUROC {result['image_auroc']}, pixel AUROC {result['pixel_auroc']}, "
            f"AUPRO {result['aupro']} ({len(failed)} localization failures)"
        )
        return result

    def metrics_report(self, objects: List[Dict[str, Any]]) -> Dict[str, Any]:
        def mean(key: str) -> Optional[float]:
            values = [obj[key] for obj in objects if obj[key] is not None]
            return float(np.mean(values)) if values else None

        return {
            "report": "metrics",
            "format_version": REPORT_FORMAT_VERSION,
            "fpr_limit": self.cfg.fpr_limit,
            "pixel_auroc_pooling": "pooled",
            "failure_policy": self.cfg.failure_policy,
            "objects": objects,
            "mean": {key: mean(key) for key in ("image_auroc", "pixel_auroc", "aupro")},
        }

    # bench

    def cmd_bench(self, model_dir: Path, query_dir: Path, repetitions: int = 10, out_dir: Optional[Path] = None):
        if repetitions < 1:
            raise StageError("bench", ValueError(f"repetitions must be >= 1, got {repetitions}"))
        bundle, queries, _ = self._load_model_and_queries(model_dir, query_dir)
        engine = InferenceEngine(bundle, self.cfg)
        if queries:
            engine.process(queries[0])

        samples: List[Dict[str, float]] = []
        reference_outputs = None
        identical = True
        for rep in range(repetitions):
            outcomes = [engine.process(q) for q in queries]
            samples.extend(o.timings.as_dict() for o in outcomes)
            outputs = [o.raw_map.scores.tobytes() if o.raw_map is not None else None for o in outcomes]
            if reference_outputs is None:
                reference_outputs = outputs
            elif outputs != reference_outputs:
                identical = False
                logger.warning(f"Repetition {rep + 1} produced different anomaly maps")
        n_localized = sum(o.localization_ok for o in outcomes) if queries else 0

        report = {
            "report": "bench",
            "format_version": REPORT_FORMAT_VERSION,
            "object_id": bundle.object_id,
            "repetitions": repetitions,
            "n_queries": len(queries),
            "n_localized": n_localized,
            "hardware": hardware_string(),
            "outputs_identical": identical,
            "stages": timing_statistics(samples),
            "reference_ms": {**REFERENCE_MS, "note": REFERENCE_NOTE},
        }
        writer = ReportWriter(Path(out_dir or model_dir), self.console)
        writer.write_report("bench", report)
        writer.print_report("bench", report)
        return report

    # synth

    def cmd_synth(self, out_dir: Path) -> Path:
        cfg = self.cfg
        with _stage("synth"):
            scene = generate_synthetic_scene(
                cfg.synthetic, cfg.synth.n_ref, cfg.synth.n_query, cfg.synth.defects, cfg.seed, self.max_workers
            )
            write_scene_directory(scene, out_dir)
        logger.info(f"Scene directory hash: {directory_hash(Path(out_dir))}")
        return Path(out_dir)

    # sweep

    def cmd_sweep(
        self,
        scene_dir: Path,
        out_dir: Path,
        fractions: Sequence[float] = DEFAULT_FRACTIONS,
        seeds: Sequence[int] = (0, 1, 2, 3, 4),
    ) -> Dict[str, Any]:
        with _stage("load"):
            scene = load_mad_scene(scene_dir, self.max_workers)
        out_dir = Path(out_dir)
        runs = []
        for fraction in sorted(fractions):
            for seed in seeds:
                runs.append(self._sweep_run(scene, out_dir / f"f{round(fraction * 100):03d}_s{seed}", fraction, seed))

        summary = SweepAnalyzer.summarize(runs)
        report = {
            "report": "sweep",
            "format_version": REPORT_FORMAT_VERSION,
            "object_id": scene.object_id,
            "fractions": sorted(float(f) for f in fractions),
            "seeds": [int(s) for s in seeds],
            "runs": [run.as_dict() for run in runs],
            "summary": summary,
            "trend": SweepAnalyzer.trend(summary),
        }
        writer = ReportWriter(out_dir, self.console)
        writer.write_report("sweep", report)
        writer.print_report("sweep", report)
        return report

    def _sweep_run(self, scene: SceneBundle, run_dir: Path, fraction: float, seed: int) -> SweepRun:
        run = SweepRun(fraction, seed, 0)
        try:
            subset = subsample_references(scene, fraction, seed)
            run.n_references = len(subset.references)
            logger.info(f"Sweep run: fraction {fraction}, seed {seed}, {run.n_references} references")
            summary, bundle = self.train_scene(subset, run_dir / "model", seed)
            inference = self.infer_queries(bundle, subset.queries, [], run_dir / "inference")
            with _stage("eval"):
                metrics = self.evaluate_object(run_dir / "inference", inference, subset.queries)
        except (HybridPadError, ValueError) as e:
            logger.error(f"Sweep run fraction {fraction} seed {seed} failed: {e}")
            run.status = str(e)
            return run
        run.psnr = summary.psnr
        run.image_auroc = metrics["image_auroc"]
        run.pixel_auroc = metrics["pixel_auroc"]
        run.aupro = metrics["aupro"]
        if inference["queries"]:
            localized = sum(q["localization_ok"] for q in inference["queries"])
            run.localization_rate = localized / len(inference["queries"])
        return run

