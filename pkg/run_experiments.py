"""
Experiment runner entry point.

    python run_experiments.py run --preset extended-data-unibct
    python run_experiments.py grid --preset grid --workers 4
    python run_experiments.py summarize runs/grid
"""

import sys

from compatlab.cli import main

if __name__ == "__main__":
    sys.exit(main())
