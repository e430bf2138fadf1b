"""
Main window of the results viewer
"""

from pathlib import Path

from PyQt6.QtWidgets import (QMainWindow, QPushButton, QVBoxLayout, QHBoxLayout, QWidget, QLabel,
                             QComboBox, QMessageBox, QTabWidget, QFileDialog, QSizePolicy)
from PyQt6.QtCore import Qt

from compatlab.cli import load_reports
from compatlab.trainer import TrainLog
from gui.comparison_widget import ComparisonWidget
from gui.results_panel import ResultsPanel
from gui.styles import SUBTITLE_STYLE, TITLE_STYLE
from gui.visualization import TrainingCurvesWidget
from utils.exporter import ResultsExporter
from utils.statistics import Statistics


class ModernButton(QPushButton):
    def __init__(self, text, parent=None):
        super().__init__(text, parent)
        self.setCursor(Qt.CursorShape.PointingHandCursor)
        self.setMinimumHeight(36)
        self.setSizePolicy(QSizePolicy.Policy.Minimum, QSizePolicy.Policy.Fixed)


class MainWindow(QMainWindow):
    def __init__(self, reports_dir=None):
        super().__init__()
        self.setWindowTitle("Compatibility Lab - Results Viewer")
        self.reports_dir = None
        self.reports = []
        self.aggregated = []
        self.setup_ui()
        if reports_dir:
            self.load_directory(reports_dir)

    def setup_ui(self):
        central = QWidget()
        self.setCentralWidget(central)
        layout = QVBoxLayout(central)
        layout.setContentsMargins(20, 16, 20, 16)
        layout.setSpacing(12)
        layout.addLayout(self.create_header())

        self.tabs = QTabWidget()
        self.comparison_widget = ComparisonWidget()
        self.tabs.addTab(self.comparison_widget, "Comparison")

        training_tab = QWidget()
        training_layout = QHBoxLayout(training_tab)
        self.curves_widget = TrainingCurvesWidget()
        self.results_panel = ResultsPanel()
        training_layout.addWidget(self.curves_widget, 3)
        training_layout.addWidget(self.results_panel, 1)
        self.tabs.addTab(training_tab, "Training")
        layout.addWidget(self.tabs, 1)

    def create_header(self):
        header = QHBoxLayout()
        titles = QVBoxLayout()
        title = QLabel("Backward-Compatible Training Results")
        title.setStyleSheet(TITLE_STYLE)
        self.folder_label = QLabel("No folder loaded")
        self.folder_label.setStyleSheet(SUBTITLE_STYLE)
        titles.addWidget(title)
        titles.addWidget(self.folder_label)
        header.addLayout(titles, 1)

        self.run_combo = QComboBox()
        self.run_combo.currentIndexChanged.connect(self.show_run)
        header.addWidget(self.run_combo)

        open_button = ModernButton("Open folder")
        open_button.clicked.connect(self.choose_directory)
        header.addWidget(open_button)

        export_button = ModernButton("Export table")
        export_button.clicked.connect(self.export_results)
        header.addWidget(export_button)
        return header

    def choose_directory(self):
        directory = QFileDialog.getExistingDirectory(self, "Select reports folder")
        if directory:
            self.load_directory(directory)

    def load_directory(self, directory):
        root = Path(directory)
        try:
            self.reports = load_reports(root)
        except FileNotFoundError as exc:
            QMessageBox.warning(self, "Folder not found", str(exc))
            return
        if not self.reports:
            QMessageBox.information(self, "No reports", f"No report.json files under {root}")
            return
        self.reports_dir = root
        rows = Statistics.sort_rows([Statistics.summary_row(data, str(path.relative_to(root)))
                                     for path, data in self.reports])
        self.aggregated = Statistics.aggregate_over_seeds(rows)
        self.comparison_widget.display(self.aggregated)
        self.folder_label.setText(f"{root}  ({len(self.reports)} runs)")

        self.run_combo.blockSignals(True)
        self.run_combo.clear()
        for path, _ in self.reports:
            self.run_combo.addItem(str(path.parent.relative_to(root)))
        self.run_combo.blockSignals(False)
        self.show_run(0)

    def show_run(self, index):
        if not 0 <= index < len(self.reports):
            return
        path, report = self.reports[index]
        self.results_panel.display_report(report)
        log_path = path.parent / "trainlog.jsonl"
        if log_path.exists():
            self.curves_widget.display_log(TrainLog.from_jsonl(log_path), self.run_combo.itemText(index))
        else:
            self.curves_widget.clear()

    def export_results(self):
        if not self.aggregated:
            QMessageBox.warning(self, "Nothing to export", "Load a reports folder first")
            return
        filename, _ = QFileDialog.getSaveFileName(self, "Export comparison", "comparison.csv",
                                                  "CSV Files (*.csv);;JSON Files (*.json)")
        if not filename:
            return
        if filename.endswith('.json'):
            ResultsExporter.export_comparison_to_json(self.aggregated, filename)
        else:
            ResultsExporter.export_comparison_to_csv(self.aggregated, filename)
        QMessageBox.information(self, "Exported", f"Comparison written to {filename}")
