import csv
import json
from pathlib import Path
from typing import Dict, List, Union

import numpy as np

PathLike = Union[str, Path]


class ResultsExporter:
    """Write run artifacts and comparison tables"""

    @staticmethod
    def _prepare(filename: PathLike) -> Path:
        path = Path(filename)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    @staticmethod
    def export_report_json(report, filename: PathLike) -> Path:
        """CompatReport (or its dict) to JSON; sorted keys, no timestamps"""
        path = ResultsExporter._prepare(filename)
        data = report if isinstance(report, dict) else report.to_dict()
        with open(path, 'w') as jsonfile:
            json.dump(data, jsonfile, indent=2, sort_keys=True)
            jsonfile.write('\n')
        return path

    @staticmethod
    def load_report_json(filename: PathLike) -> dict:
        with open(filename) as jsonfile:
            data = json.load(jsonfile)
        for key in ('modes', 'verdicts', 'reference_far'):
            if key not in data:
                raise KeyError(f"report {filename} lacks '{key}'")
        return data

    @staticmethod
    def export_trainlog_jsonl(log, filename: PathLike) -> Path:
        return log.to_jsonl(ResultsExporter._prepare(filename))

    @staticmethod
    def export_histograms_csv(report, filename: PathLike) -> Path:
        """Genuine/impostor score histograms of every mode"""
        path = ResultsExporter._prepare(filename)
        with open(path, 'w', newline='') as csvfile:
            writer = csv.writer(csvfile)
            writer.writerow(['mode', 'bin_left', 'bin_right', 'genuine', 'impostor'])
            for mode, metrics in report.modes.items():
                hist = metrics.histogram
                if hist is None:
                    continue
                edges = hist['edges']
                for i, (gen, imp) in enumerate(zip(hist['genuine'], hist['impostor'])):
                    writer.writerow([mode, edges[i], edges[i + 1], gen, imp])
        return path

    @staticmethod
    def export_features_npz(filename: PathLike, **arrays: np.ndarray) -> Path:
        path = ResultsExporter._prepare(filename)
        np.savez(path, **arrays)
        return path

    @staticmethod
    def export_comparison_to_csv(rows: List[dict], filename: PathLike) -> Path:
        """One row per dict; columns in first-seen order"""
        path = ResultsExporter._prepare(filename)
        fieldnames: List[str] = []
        for row in rows:
            fieldnames.extend(k for k in row if k not in fieldnames)
        with open(path, 'w', newline='') as csvfile:
            writer = csv.DictWriter(csvfile, fieldnames=fieldnames)
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
        return path

    @staticmethod
    def export_comparison_to_json(rows: Union[List[dict], dict], filename: PathLike) -> Path:
        path = ResultsExporter._prepare(filename)
        with open(path, 'w') as jsonfile:
            json.dump(rows, jsonfile, indent=2, sort_keys=True)
            jsonfile.write('\n')
        return path

    @staticmethod
    def export_summary_report(rows: List[dict], margins: Dict[str, float], filename: PathLike) -> Path:
        """Plain-text comparison table"""
        path = ResultsExporter._prepare(filename)
        with open(path, 'w') as f:
            f.write("Backward Compatibility Summary\n")
            f.write("=" * 78 + "\n\n")
            f.write(f"{'scenario':<16}{'loss':<16}{'variant':<10}{'seeds':>6}"
                    f"{'cross@1':>10}{'old@1':>10}{'comp.':>10}\n")
            f.write("-" * 78 + "\n")
            for row in rows:
                f.write(f"{row['scenario']:<16}{row['loss']:<16}{row['variant']:<10}{row['seeds']:>6}"
                        f"{row.get('cross_top1_mean', float('nan')):>10.4f}"
                        f"{row.get('self_old_top1_mean', float('nan')):>10.4f}"
                        f"{row['identification_compatible_count']:>7}/{row['seeds']:<2}\n")
            if margins:
                f.write("\nRefined minus vanilla (mean cross top-1):\n")
                f.write("-" * 78 + "\n")
                for scenario, margin in margins.items():
                    f.write(f"{scenario:<16}{margin:+.4f}\n")
        return path
