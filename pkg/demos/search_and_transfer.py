"""
Search a bitwidth policy on proxy data, finetune it on shifted target data
==========================================================================

Uses the pinned benchmark config with fewer seeds so it finishes in seconds.
"""

from pathlib import Path
import tempfile

from asgampq import harness
from asgampq.config import load_config

cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "benchmark.json")
cfg = cfg.replace(seeds=[0, 1])
out = Path(tempfile.mkdtemp(prefix="asgampq-demo-"))

res = harness.run_search(cfg, "asga", seed=0, out_dir=out / "search")
print(res.policy.to_json())
for row in res.rows:
    print(row.epoch, round(row.accuracy, 4), round(row.sigma_gap, 3), row.total_bops)

ft = harness.run_finetune(res.policy, cfg, seed=0, out_dir=out / "finetune")
print("target accuracy", ft.accuracy)

# lambda trades accuracy for fewer bit operations
for lam in (0.0, 0.01, 1.0):
    r = harness.run_search(cfg.with_asga(lam=lam), "asga", seed=0, out_dir=out / f"lam{lam}")
    print("lambda", lam, "bops", r.policy.total_bops, "feasible", r.policy.feasible)

summary = harness.run_transfer(cfg, out_dir=out / "transfer")
for m, d in summary["methods"].items():
    print(m, {k: round(v, 4) for k, v in d.items() if k != "runs"})
print("outputs in", out)
