from PyQt6.QtWidgets import QWidget, QVBoxLayout, QLabel, QGridLayout

from gui.styles import CARD_STYLE, ERROR_PANEL_STYLE, SUCCESS_PANEL_STYLE

MODES = ('cross', 'self_old', 'self_new')


class ResultsPanel(QWidget):
    """Verdicts and headline metrics of one report"""

    def __init__(self):
        super().__init__()
        self.setup_ui()

    def setup_ui(self):
        layout = QVBoxLayout(self)

        title = QLabel("Compatibility Verdict")
        title.setStyleSheet("font-size: 16px; font-weight: bold;")
        layout.addWidget(title)

        self.verification_label = QLabel("Verification: --")
        self.identification_label = QLabel("Identification: --")
        layout.addWidget(self.verification_label)
        layout.addWidget(self.identification_label)

        grid_frame = QWidget()
        grid_frame.setStyleSheet(CARD_STYLE)
        self.stats_layout = QGridLayout(grid_frame)
        layout.addWidget(grid_frame)

        self.labels = {}
        for col, header in enumerate(('', 'TAR', 'top-1', 'top-5'), start=0):
            label = QLabel(header)
            label.setStyleSheet("font-weight: bold;")
            self.stats_layout.addWidget(label, 0, col)
        for row, mode in enumerate(MODES, start=1):
            self.stats_layout.addWidget(QLabel(mode), row, 0)
            for col, metric in enumerate(('tar', 'top1', 'top5'), start=1):
                value = QLabel("--")
                self.stats_layout.addWidget(value, row, col)
                self.labels[(mode, metric)] = value
        layout.addStretch()

    def set_verdict(self, label: QLabel, name: str, compatible: bool):
        label.setText(f"{name}: {'compatible' if compatible else 'not compatible'}")
        label.setStyleSheet(SUCCESS_PANEL_STYLE if compatible else ERROR_PANEL_STYLE)

    def display_report(self, report: dict):
        verdicts = report['verdicts']
        self.set_verdict(self.verification_label,
                         f"Verification (FAR {report['reference_far']:g})", verdicts['verification_compatible'])
        self.set_verdict(self.identification_label, "Identification (top-1)",
                         verdicts['identification_compatible'])
        ref = f"{report['reference_far']:g}"
        for mode in MODES:
            metrics = report['modes'][mode]
            self.labels[(mode, 'tar')].setText(f"{metrics['tar_at_far'][ref]:.4f}")
            self.labels[(mode, 'top1')].setText(f"{metrics['topk']['1']:.4f}")
            top5 = metrics['topk'].get('5')
            self.labels[(mode, 'top5')].setText('--' if top5 is None else f"{top5:.4f}")
