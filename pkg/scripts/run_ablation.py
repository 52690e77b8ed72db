#!/usr/bin/env python3
"""Sweep one distillation weight over its published ablation grid.

    python scripts/run_ablation.py kl --config configs/default.toml

The first argument names the sweep (kl, mse or pseudo); remaining flags are
forwarded to `dakd ladder`. Grids: kl = 0.1/0.4/0.7/1.0,
mse = 0.005/0.01/0.05, pseudo = 0.001/0.01/0.05/0.1/0.5/1.0.
"""

import sys

from dakd.cli import ABLATION_GRIDS, main

if __name__ == "__main__":
    if len(sys.argv) < 2 or sys.argv[1] not in ABLATION_GRIDS:
        print(f"usage: run_ablation.py {{{','.join(sorted(ABLATION_GRIDS))}}} "
              "[dakd ladder flags]", file=sys.stderr)
        sys.exit(2)
    sys.exit(main(["ladder", "--ablation", sys.argv[1], *sys.argv[2:]]))
