"""
Comparison tab: one table row per (scenario, loss, variant) averaged over
seeds, and cross-test vs old self-test bar charts.
"""

from PyQt6.QtWidgets import (QWidget, QVBoxLayout, QHBoxLayout, QTableWidget, QTableWidgetItem,
                             QLabel, QFrame, QHeaderView, QAbstractItemView)
from PyQt6.QtCore import Qt
from PyQt6.QtGui import QColor, QBrush, QFont
from matplotlib.backends.backend_qtagg import FigureCanvasQTAgg as FigureCanvas
from matplotlib.figure import Figure
import matplotlib.pyplot as plt
import numpy as np

from gui.styles import COLORS, MATPLOTLIB_STYLE, MODE_COLORS, SUCCESS_PANEL_STYLE, TITLE_STYLE
from utils.statistics import Statistics

COLUMNS = [
    ('Scenario', 'scenario', None),
    ('Loss', 'loss', None),
    ('Variant', 'variant', None),
    ('Seeds', 'seeds', None),
    ('Cross TAR', 'cross_tar_mean', '{:.4f}'),
    ('Old TAR', 'self_old_tar_mean', '{:.4f}'),
    ('New TAR', 'self_new_tar_mean', '{:.4f}'),
    ('Cross top-1', 'cross_top1_mean', '{:.4f}'),
    ('Old top-1', 'self_old_top1_mean', '{:.4f}'),
    ('New top-1', 'self_new_top1_mean', '{:.4f}'),
    ('Cross top-5', 'cross_top5_mean', '{:.4f}'),
]


class ComparisonWidget(QWidget):
    """Seed-aggregated comparison of every method found in a reports folder"""

    def __init__(self):
        super().__init__()
        plt.rcParams.update(MATPLOTLIB_STYLE)
        self.setup_ui()

    def setup_ui(self):
        layout = QVBoxLayout(self)
        layout.setContentsMargins(16, 16, 16, 16)
        layout.setSpacing(14)

        title = QLabel("Method Comparison")
        title.setStyleSheet(TITLE_STYLE)
        layout.addWidget(title)

        self.recommendation_label = QLabel("Open a reports folder to compare methods")
        self.recommendation_label.setStyleSheet(SUCCESS_PANEL_STYLE)
        self.recommendation_label.setWordWrap(True)
        layout.addWidget(self.recommendation_label)

        self.results_table = QTableWidget()
        self.results_table.setAlternatingRowColors(True)
        self.results_table.setSelectionBehavior(QAbstractItemView.SelectionBehavior.SelectRows)
        self.results_table.verticalHeader().setVisible(False)
        self.results_table.setShowGrid(False)
        layout.addWidget(self.results_table, 1)

        charts_frame = QFrame()
        charts_layout = QHBoxLayout(charts_frame)
        charts_layout.setContentsMargins(4, 4, 4, 4)
        self.top1_canvas = FigureCanvas(Figure(figsize=(6, 4), facecolor=COLORS['bg_medium']))
        self.tar_canvas = FigureCanvas(Figure(figsize=(6, 4), facecolor=COLORS['bg_medium']))
        charts_layout.addWidget(self.top1_canvas)
        charts_layout.addWidget(self.tar_canvas)
        layout.addWidget(charts_frame, 1)

    def display(self, aggregated):
        """Fill the table and charts from ``Statistics.aggregate_over_seeds`` output"""
        rankings = Statistics.rank_methods(aggregated)
        self.recommendation_label.setText(f"<b>Best cross test:</b> {Statistics.get_recommendation(rankings)}")
        self.display_table(aggregated)
        self.draw_bars(self.top1_canvas, aggregated, 'top1', 'Top-1 identification')
        self.draw_bars(self.tar_canvas, aggregated, 'tar', 'TAR at reference FAR')

    def display_table(self, aggregated):
        headers = [c[0] for c in COLUMNS] + ['Compatible']
        self.results_table.setRowCount(len(aggregated))
        self.results_table.setColumnCount(len(headers))
        self.results_table.setHorizontalHeaderLabels(headers)

        for i, entry in enumerate(aggregated):
            for col, (_, key, fmt) in enumerate(COLUMNS):
                value = entry.get(key)
                text = '--' if value is None else (fmt.format(value) if fmt else str(value))
                item = QTableWidgetItem(text)
                item.setTextAlignment(Qt.AlignmentFlag.AlignCenter)
                self.results_table.setItem(i, col, item)

            compatible = entry['identification_compatible_count']
            verdict = QTableWidgetItem(f"{compatible}/{entry['seeds']}")
            verdict.setTextAlignment(Qt.AlignmentFlag.AlignCenter)
            verdict.setFont(QFont("Helvetica Neue", 11, QFont.Weight.Bold))
            color = COLORS['success_light'] if compatible == entry['seeds'] else COLORS['error_light']
            verdict.setForeground(QBrush(QColor(color)))
            self.results_table.setItem(i, len(COLUMNS), verdict)

        self.results_table.horizontalHeader().setSectionResizeMode(QHeaderView.ResizeMode.Stretch)

    def draw_bars(self, canvas, aggregated, metric, title):
        """Grouped bars of cross vs old self-test per method"""
        canvas.figure.clear()
        ax = canvas.figure.add_subplot(111)
        names = [f"{e['scenario']}\n{e['loss']}/{e['variant']}" for e in aggregated]
        x = np.arange(len(names))
        width = 0.38
        for offset, mode, label in ((-width / 2, 'cross', 'cross'), (width / 2, 'self_old', 'old self')):
            values = [e.get(f'{mode}_{metric}_mean', 0.0) for e in aggregated]
            ax.bar(x + offset, values, width, label=label, color=MODE_COLORS[mode], alpha=0.85)

        ax.set_title(title, fontsize=12, fontweight='600')
        ax.set_xticks(x)
        ax.set_xticklabels(names, fontsize=7, rotation=30, ha='right')
        ax.set_ylim(0, 1)
        ax.legend()
        ax.spines['top'].set_visible(False)
        ax.spines['right'].set_visible(False)
        ax.grid(axis='y', alpha=0.2)
        canvas.figure.tight_layout()
        canvas.draw()
