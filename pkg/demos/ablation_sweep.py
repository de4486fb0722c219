"""Compare the three model variants on the smoke task through the command line.

Run:  python3 demos/ablation_sweep.py [out_dir]
This is a short version of the robustness-ordering experiment: 2 seeds and
40 epochs per variant, so expect noisy numbers.  Raise "epochs" and --seeds
for a real comparison.
"""

import json
import sys
import tempfile
from pathlib import Path

from slfc.cli import main

out = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="slfc_sweep_"))
out.mkdir(parents=True, exist_ok=True)
config = out / "run.json"
config.write_text(
    json.dumps(
        {
            "gen": {"n_demos": 40, "seed": 0},
            "train": {"epochs": 40, "batch_size": 32},
            "eval": {"episodes": 20},
        },
        indent=2,
    )
)

code = main(["sweep", "--config", str(config), "--out-dir", str(out), "--seeds", "2"])
print((out / "sweep.csv").read_text())
sys.exit(code)
