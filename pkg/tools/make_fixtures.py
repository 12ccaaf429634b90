"""Regenerate the stored cross-world means used as simulation ground truth."""

import json
import sys
from pathlib import Path

from quadmed.dgp import MIN_DIMS, DgpSpec, oracle_theta

N_MC = 10_000_000
SEEDS = {"S1": 20241, "S2": 20242, "S3": 20243}


def main(out):
    fixtures = {}
    for setting, seed in SEEDS.items():
        d1, d2 = MIN_DIMS[setting]
        res = oracle_theta(DgpSpec(setting, 1, d1, d2), N_MC, seed)
        res.update(d1=d1, d2=d2)
        fixtures[setting] = res
        print(setting, res, flush=True)
    Path(out).write_text(json.dumps(fixtures, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "src/quadmed/fixtures/oracle_theta.json")
