"""Two-state batch comparison followed by a trace check.

Usage: python3 scripts/run_two_state.py [OUT_DIR] [extra dampc options]
"""

import sys
from pathlib import Path

from dampc.cli import main

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "out/two-state"
    cfg = str(ROOT / "configs" / "two-state.cfg")
    code = main(["compare", "--config", cfg, "--out", out, *sys.argv[2:]])
    if code == 0:
        code = main(["verify", "--config", cfg, "--out", out])
    sys.exit(code)
