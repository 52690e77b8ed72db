#!/usr/bin/env python3
"""Run the full paradigm ladder from a config file.

Thin wrapper over the `dakd ladder` CLI so the experiment is a one-liner:

    python scripts/run_ladder.py --config configs/default.toml --seed 0
"""

import sys

from dakd.cli import main

if __name__ == "__main__":
    sys.exit(main(["ladder", *sys.argv[1:]]))
