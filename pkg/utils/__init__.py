from .exporter import ResultsExporter
from .statistics import Statistics

__all__ = ['ResultsExporter', 'Statistics']
