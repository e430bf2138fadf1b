"""
Command-line experiment runner.

    run           one experiment: generate, split, train old, train new, evaluate
    grid          every scenario x loss x variant x seed of a grid preset
    summarize     comparison tables from a directory of report.json files
    refine-demo   prototype refinement on a dumped train_features.npz
    list-presets  names of the shipped presets
"""

import argparse
import copy
import logging
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from compatlab.config import ExperimentConfig, list_presets, resolve_config
from compatlab.errors import CompatLabError, ConfigurationError, StageError
from compatlab.evaluation import CompatReport, evaluate_pair
from compatlab.prototype_engine import (ClassFeatures, PropagationMode, PrototypeVariant, RefinedClass,
                                        RefinementConfig, cap_class_rows, dump_refinement, refine_all)
from compatlab.synthetic_data import allocate_split, describe_split, generate_dataset, generate_eval_set
from compatlab.trainer import train_new_model, train_old_model
from utils.exporter import ResultsExporter
from utils.statistics import Statistics

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


@contextmanager
def stage(name: str):
    """Label any lab error raised inside the block with the pipeline stage"""
    logger.info("stage: %s", name)
    try:
        yield
    except StageError:
        raise
    except CompatLabError as exc:
        raise StageError(name, exc) from exc


def run_experiment(config: ExperimentConfig, progress: bool = True) -> CompatReport:
    """Full pipeline for one config; artifacts go to the resolved output directory."""
    config.validate()
    out = config.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    train_config = copy.deepcopy(config.train)
    train_config.progress = progress

    with stage("generate"):
        data = generate_dataset(config.dataset)
    with stage("split"):
        split = allocate_split(data, config.scenario, config.old_fraction, config.split_seed)
        logger.info("split: %s", describe_split(split))
    with stage("train-old"):
        old_model, old_classifier = train_old_model(split.old_set, config.model_old, train_config,
                                                    log_path=out / "trainlog_old.jsonl")
    with stage("train-new"):
        new_model, log = train_new_model(split, old_model, old_classifier, config.model_new,
                                         train_config, config.refinement)
    with stage("evaluate"):
        eval_set = generate_eval_set(data, config.eval.queries_per_class,
                                     config.eval.gallery_per_class, config.eval.seed)
        report = evaluate_pair(old_model, new_model, eval_set, config.eval, config.metadata())

    with stage("write"):
        ResultsExporter.export_report_json(report, out / "report.json")
        ResultsExporter.export_trainlog_jsonl(log, out / "trainlog.jsonl")
        ResultsExporter.export_histograms_csv(report, out / "scores.csv")
        config.dump_yaml(out / "config.yaml")
        if config.dump_features:
            ResultsExporter.export_features_npz(
                out / "features" / "eval_features.npz",
                old_query=old_model.forward(eval_set.query.inputs),
                new_query=new_model.forward(eval_set.query.inputs),
                old_gallery=old_model.forward(eval_set.gallery.inputs),
                new_gallery=new_model.forward(eval_set.gallery.inputs),
                query_labels=eval_set.query.labels,
                gallery_labels=eval_set.gallery.labels,
            )
            ResultsExporter.export_features_npz(
                out / "features" / "train_features.npz",
                old=old_model.forward(split.new_set.inputs),
                new=new_model.forward(split.new_set.inputs),
                labels=split.new_set.labels,
            )
    logger.info("run %s written to %s (verification compatible: %s, identification compatible: %s)",
                config.run_label, out, report.verification_compatible, report.identification_compatible)
    return report


def _run_grid_member(config: ExperimentConfig) -> Tuple[str, Optional[str]]:
    try:
        run_experiment(config, progress=False)
    except CompatLabError as exc:
        return config.run_label, str(exc)
    return config.run_label, None


def run_grid(configs: Sequence[ExperimentConfig], workers: int = 1) -> Dict[str, Optional[str]]:
    """Run every config; returns run label -> error message (None on success)"""
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_grid_member, configs))
    else:
        outcomes = [_run_grid_member(cfg) for cfg in configs]
    results = dict(outcomes)
    for label, error in results.items():
        if error:
            logger.error("grid member %s failed: %s", label, error)
    return results


@dataclass
class Summary:
    rows: List[dict]
    aggregated: List[dict]
    margins: Dict[str, float]


def load_reports(reports_dir) -> List[Tuple[Path, dict]]:
    """Every readable report.json under ``reports_dir`` in path order; malformed ones are skipped"""
    root = Path(reports_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"reports directory not found: {root}")
    reports = []
    for path in sorted(root.rglob("report.json")):
        try:
            data = ResultsExporter.load_report_json(path)
            Statistics.summary_row(data)
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            message = f"skipping malformed report {path}: {exc}"
            logger.warning(message)
            warnings.warn(message, RuntimeWarning)
            continue
        reports.append((path, data))
    return reports


def summarize(reports_dir, output_dir=None) -> Summary:
    """Collect every report.json under ``reports_dir`` into comparison tables"""
    root = Path(reports_dir)
    rows = [Statistics.summary_row(data, str(path.relative_to(root))) for path, data in load_reports(root)]
    if not rows:
        raise ConfigurationError("reports_dir", f"no readable report.json under {root}")

    rows = Statistics.sort_rows(rows)
    aggregated = Statistics.aggregate_over_seeds(rows)
    margins = Statistics.refinement_margin(aggregated)
    out = Path(output_dir) if output_dir else root
    ResultsExporter.export_comparison_to_csv(rows, out / "summary.csv")
    ResultsExporter.export_comparison_to_json(rows, out / "summary.json")
    ResultsExporter.export_comparison_to_csv(aggregated, out / "summary_by_seed.csv")
    ResultsExporter.export_comparison_to_json({"aggregated": aggregated, "refinement_margin": margins},
                                              out / "summary_by_seed.json")
    ResultsExporter.export_summary_report(aggregated, margins, out / "summary.txt")
    for scenario, margin in margins.items():
        logger.info("%s: refined - vanilla cross top-1 = %+.4f", scenario, margin)
    logger.info("summarized %d reports into %s", len(rows), out)
    return Summary(rows, aggregated, margins)


def refine_demo(features_path, output, config: Optional[RefinementConfig] = None) -> Dict[int, RefinedClass]:
    """Refine prototypes from dumped old/new training features and write the dump"""
    config = (config or RefinementConfig()).validate()
    with np.load(features_path) as archive:
        missing = {"old", "new", "labels"} - set(archive.files)
        if missing:
            raise ConfigurationError("features", f"{features_path} lacks arrays {sorted(missing)}")
        old, new, labels = archive["old"], archive["new"], archive["labels"]
    features = {}
    for class_id in np.unique(labels):
        rows = cap_class_rows(np.flatnonzero(labels == class_id), config.per_class_cap, config.seed, class_id)
        features[int(class_id)] = ClassFeatures(old[rows], new[rows])
    results = refine_all(features, config)
    dump_refinement(output, results)
    return results


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compatlab", description="Backward-compatible representation lab")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    verbs = parser.add_subparsers(dest="verb", required=True)

    def experiment_flags(p):
        p.add_argument("--preset", help="preset name (see list-presets)")
        p.add_argument("--config", help="YAML experiment file")
        p.add_argument("--seed", type=int, help="experiment seed (split seed unchanged)")
        p.add_argument("--output-dir", help="output directory")
        p.add_argument("--dump-features", action="store_true", help="write feature dumps")
        p.add_argument("--no-progress", action="store_true", help="hide progress bars")

    experiment_flags(verbs.add_parser("run", help="run one experiment"))
    grid = verbs.add_parser("grid", help="run an experiment grid")
    experiment_flags(grid)
    grid.add_argument("--workers", type=int, default=1, help="parallel processes")

    summ = verbs.add_parser("summarize", help="tabulate reports")
    summ.add_argument("reports_dir")
    summ.add_argument("--output", help="where to write the tables (default: reports_dir)")

    demo = verbs.add_parser("refine-demo", help="refine prototypes from a feature dump")
    demo.add_argument("features", help="train_features.npz written by --dump-features")
    demo.add_argument("--output", default="refinement.npz")
    demo.add_argument("--temperature", type=float, default=0.05)
    demo.add_argument("--aggregation", type=float, default=0.9)
    demo.add_argument("--variant", default="refined", choices=[v.value for v in PrototypeVariant])
    demo.add_argument("--mode", default="closed-form", choices=[m.value for m in PropagationMode])
    demo.add_argument("--iterations", type=int, default=50)

    verbs.add_parser("list-presets", help="show shipped presets")
    return parser


def _experiment_config(args) -> Tuple[ExperimentConfig, Optional[object]]:
    config, grid = resolve_config(args.preset, args.config, args.seed, args.output_dir)
    if args.dump_features:
        config.dump_features = True
    return config, grid


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        if args.verb == "list-presets":
            for name in list_presets():
                print(name)
            return 0

        if args.verb == "run":
            config, _ = _experiment_config(args)
            run_experiment(config, progress=not args.no_progress)
            return 0

        if args.verb == "grid":
            config, grid = _experiment_config(args)
            if grid is None:
                raise ConfigurationError("grid", "the preset/config has no grid section")
            if args.seed is not None:
                grid.seeds = [args.seed]
            configs = list(grid.expand(config))
            logger.info("grid of %d experiments under %s", len(configs), config.resolved_output_dir())
            results = run_grid(configs, args.workers)
            if any(results.values()):
                logger.error("%d of %d grid members failed", sum(bool(e) for e in results.values()),
                             len(results))
            else:
                summarize(config.resolved_output_dir())
            return 1 if any(results.values()) else 0

        if args.verb == "summarize":
            summarize(args.reports_dir, args.output)
            return 0

        if args.verb == "refine-demo":
            config = RefinementConfig(temperature=args.temperature, aggregation=args.aggregation,
                                      variant=args.variant, mode=args.mode, iterations=args.iterations)
            refine_demo(args.features, args.output, config)
            return 0
    except StageError as exc:
        logger.error("stage %s failed: %s", exc.stage, exc)
        return 1
    except (CompatLabError, OSError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
