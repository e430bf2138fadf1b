from gui.main_window import MainWindow
from gui.visualization import TrainingCurvesWidget
from gui.results_panel import ResultsPanel
from gui.comparison_widget import ComparisonWidget

__all__ = ['MainWindow', 'TrainingCurvesWidget', 'ResultsPanel', 'ComparisonWidget']
