#!/usr/bin/env python3
"""One-command driver for the regularization study.

Example:
    python scripts/run_ablation.py --out runs/ablation --seed 0
"""
import sys

from vpd.ablation import main

if __name__ == "__main__":
    sys.exit(main())
