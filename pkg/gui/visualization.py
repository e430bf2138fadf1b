"""
Training tab: loss curves of one run with prototype regeneration markers
"""

from PyQt6.QtWidgets import QWidget, QVBoxLayout, QLabel
from matplotlib.backends.backend_qtagg import FigureCanvasQTAgg as FigureCanvas
from matplotlib.figure import Figure
import matplotlib.pyplot as plt

from compatlab.trainer import TrainLog
from gui.styles import CHART_COLORS, COLORS, MATPLOTLIB_STYLE, SUBTITLE_STYLE


class TrainingCurvesWidget(QWidget):
    def __init__(self):
        super().__init__()
        plt.rcParams.update(MATPLOTLIB_STYLE)
        layout = QVBoxLayout(self)
        layout.setContentsMargins(16, 16, 16, 16)

        self.caption = QLabel("No run selected")
        self.caption.setStyleSheet(SUBTITLE_STYLE)
        layout.addWidget(self.caption)

        self.canvas = FigureCanvas(Figure(figsize=(9, 5), facecolor=COLORS['bg_medium']))
        layout.addWidget(self.canvas, 1)

    def display_log(self, log: TrainLog, label: str = ""):
        fig = self.canvas.figure
        fig.clear()
        ax = fig.add_subplot(111)
        epochs = log.column('epoch')
        for i, name in enumerate(('cls_loss', 'compat_loss', 'total_loss')):
            ax.plot(epochs, log.column(name), label=name.replace('_', ' '),
                    color=CHART_COLORS[i], linewidth=2)
        for record in log:
            if record.prototype_regen:
                ax.axvline(record.epoch, color=COLORS['secondary'], linestyle='--', alpha=0.6)

        lr_ax = ax.twinx()
        lr_ax.step(epochs, log.column('lr'), where='post', color=COLORS['text_muted'], alpha=0.7, label='lr')
        lr_ax.set_ylabel('learning rate')

        ax.set_xlabel('epoch')
        ax.set_ylabel('loss')
        ax.set_title('Training losses (dashed: prototype regeneration)', fontsize=12, fontweight='600')
        ax.legend(loc='upper right')
        ax.grid(alpha=0.2)
        fig.tight_layout()
        self.canvas.draw()
        self.caption.setText(f"{label}  ({len(log)} epochs)")

    def clear(self, message: str = "No training log for this run"):
        self.canvas.figure.clear()
        self.canvas.draw()
        self.caption.setText(message)
