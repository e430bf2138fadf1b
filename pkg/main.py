import sys
from PyQt6.QtWidgets import QApplication
from gui.main_window import MainWindow
from gui.styles import MAIN_STYLESHEET


def main():
    """Results viewer: python main.py [reports_dir]"""
    app = QApplication(sys.argv)
    app.setStyleSheet(MAIN_STYLESHEET)

    window = MainWindow(sys.argv[1] if len(sys.argv) > 1 else None)
    window.resize(1280, 860)
    window.show()
    sys.exit(app.exec())


if __name__ == "__main__":
    main()
