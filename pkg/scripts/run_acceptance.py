"""Run the acceptance suite and print the per-criterion verdicts.

Usage: python3 scripts/run_acceptance.py [-k EXPR]
"""

import re
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    cmd = [sys.executable, "-m", "pytest", "-s", "-q", str(ROOT / "tests" / "test_acceptance.py"), *sys.argv[1:]]
    proc = subprocess.run(cmd, cwd=ROOT, capture_output=True, text=True)
    lines = [l for l in proc.stdout.splitlines() if re.match(r"CRITERION \d+:", l)]
    print("\n".join(lines) if lines else proc.stdout + proc.stderr)
    sys.exit(proc.returncode)
