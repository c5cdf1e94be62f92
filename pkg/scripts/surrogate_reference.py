"""Regenerate the pinned OLS BASELINE reference on the surrogate district geometry.

Usage: python scripts/surrogate_reference.py [reps] [seed] [threads]
Writes tests/data/surrogate_reference.json.
"""
import json
import sys
from pathlib import Path

from clustinf.simstudy import DesignSpec, run_study


def main():
    reps = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
    seed = int(sys.argv[2]) if len(sys.argv) > 2 else 918273
    threads = int(sys.argv[3]) if len(sys.argv) > 3 else 1
    spec = DesignSpec(model="OLS", error="BASELINE", reps=reps, B=200, seed=seed)
    report = run_study(spec, methods=("IM", "CRS"), threads=threads)
    out = {
        "design": spec.name, "reps": report.completed, "B": spec.B, "seed": seed,
        "failures": len(report.failures),
        "size": {m: report.size(m) for m in ("IM", "CRS")},
        "khat": {m: report.khat_freq(m) for m in ("IM", "CRS")},
        "alpha_q50": {m: report.alpha_quantiles(m)[2] for m in ("IM", "CRS")},
        "elapsed_s": round(report.elapsed, 1),
    }
    path = Path(__file__).resolve().parents[1] / "tests" / "data" / "surrogate_reference.json"
    path.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
