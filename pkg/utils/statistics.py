from collections import defaultdict
from typing import Dict, List, Optional

import numpy as np

from compatlab.synthetic_data import Scenario

SCENARIO_ORDER = {s.value: i for i, s in enumerate(Scenario)}
METRIC_COLUMNS = [
    'cross_tar', 'self_old_tar', 'self_new_tar',
    'cross_top1', 'self_old_top1', 'self_new_top1',
    'cross_top5', 'self_old_top5', 'self_new_top5',
]
KEY_COLUMNS = ['scenario', 'loss', 'variant']


class Statistics:
    """Cross-run tables built from report dictionaries"""

    @staticmethod
    def summary_row(report: dict, source: str = '') -> dict:
        """Flatten one report into a comparison-table row (values copied, not recomputed)"""
        meta = report.get('metadata', {})
        ref = f"{report['reference_far']:g}"
        row = {
            'scenario': meta.get('scenario', ''),
            'loss': meta.get('loss', ''),
            'variant': meta.get('variant', ''),
            'seed': meta.get('seed', 0),
            'reference_far': report['reference_far'],
        }
        for mode in ('cross', 'self_old', 'self_new'):
            metrics = report['modes'][mode]
            row[f'{mode}_tar'] = metrics['tar_at_far'][ref]
            row[f'{mode}_top1'] = metrics['topk']['1']
            row[f'{mode}_top5'] = metrics['topk'].get('5')
        row['verification_compatible'] = report['verdicts']['verification_compatible']
        row['identification_compatible'] = report['verdicts']['identification_compatible']
        row['source'] = source
        return row

    @staticmethod
    def sort_rows(rows: List[dict]) -> List[dict]:
        return sorted(rows, key=lambda r: (SCENARIO_ORDER.get(r['scenario'], len(SCENARIO_ORDER)),
                                           r['scenario'], r['loss'], r['variant'], r.get('seed', 0)))

    @staticmethod
    def aggregate_over_seeds(rows: List[dict]) -> List[dict]:
        """Mean/std of every metric per (scenario, loss, variant) plus verdict counts"""
        groups = defaultdict(list)
        for row in rows:
            groups[tuple(row[k] for k in KEY_COLUMNS)].append(row)

        aggregated = []
        for key, members in groups.items():
            entry = dict(zip(KEY_COLUMNS, key))
            entry['seeds'] = len(members)
            for column in METRIC_COLUMNS:
                values = [m[column] for m in members if m.get(column) is not None]
                if values:
                    entry[f'{column}_mean'] = float(np.mean(values))
                    entry[f'{column}_std'] = float(np.std(values))
            entry['verification_compatible_count'] = sum(bool(m['verification_compatible']) for m in members)
            entry['identification_compatible_count'] = sum(bool(m['identification_compatible']) for m in members)
            aggregated.append(entry)
        return Statistics.sort_rows(aggregated)

    @staticmethod
    def refinement_margin(aggregated: List[dict]) -> Dict[str, float]:
        """Per scenario: refined minus vanilla mean cross top-1 (when both are present)"""
        refined, vanilla = {}, {}
        for entry in aggregated:
            value = entry.get('cross_top1_mean')
            if value is None:
                continue
            if entry['loss'] == 'unibct' and entry['variant'] == 'refined':
                refined[entry['scenario']] = value
            elif entry['variant'] == 'vanilla' and entry['loss'] in ('unibct', 'unibct-vanilla'):
                vanilla.setdefault(entry['scenario'], value)
        ordered = sorted(refined, key=lambda s: SCENARIO_ORDER.get(s, len(SCENARIO_ORDER)))
        return {s: refined[s] - vanilla[s] for s in ordered if s in vanilla}

    @staticmethod
    def rank_methods(aggregated: List[dict], scenario: Optional[str] = None) -> List[dict]:
        """Rank (loss, variant) entries by mean cross top-1, then cross TAR"""
        entries = [e for e in aggregated if scenario is None or e['scenario'] == scenario]
        ranked = sorted(entries, key=lambda e: (-e.get('cross_top1_mean', 0.0),
                                                -e.get('cross_tar_mean', 0.0), e['loss'], e['variant']))
        return [dict(e, rank=i) for i, e in enumerate(ranked, 1)]

    @staticmethod
    def get_recommendation(rankings: List[dict]) -> str:
        if not rankings:
            return "No data available"
        best = rankings[0]
        name = f"{best['loss']} ({best['variant']})"
        compatible = best['identification_compatible_count']
        if compatible == best['seeds']:
            return f"{name} - compatible in every seed, cross top-1 {best['cross_top1_mean']:.3f}"
        if compatible:
            return f"{name} - compatible in {compatible}/{best['seeds']} seeds"
        return f"{name} - best cross top-1 but never beats the old self test"
