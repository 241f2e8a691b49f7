"""Head-to-head retention study: geometry-aware runs vs the plain low-rank control.

Trains matched pairs (same task, seed, and budget) across a seed grid, then
prints per-seed drift, the medians, and the geometry summaries. Run dirs land
under --out so `grit audit` and `grit fit-law` can consume them afterwards.

Usage:
    python3 scripts/run_forgetting_comparison.py --seeds 9 --out runs/forgetting
"""

import argparse
import json
from pathlib import Path

import numpy as np

from grit.config import GritConfig
from grit.trainer import run_experiment

TASK = "two_task_forgetting(d=12, hidden=12, pretrain_steps=100, ft_noise=0.25, delta_scale=0.2)"


def make_config(mode: str, seed: int, steps: int) -> GritConfig:
    return GritConfig(
        task=TASK, steps=steps, seed=seed, mode=mode,
        reprojection_freq=40, reprojection_warmup_steps=80,
        kfac_update_freq=5, kfac_min_samples=64, g_gate_min_samples=64,
        min_lora_rank=2, rank_adaptation_threshold=0.85, lora_rank=8,
        use_two_sided=True, kfac_damping=0.1, lambda_r=0.02,
        learning_rate=0.02, telemetry_every=100,
    )


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=9)
    parser.add_argument("--steps", type=int, default=500)
    parser.add_argument("--out", default="runs/forgetting")
    args = parser.parse_args()

    out_root = Path(args.out)
    rows = []
    for seed in range(args.seeds):
        results = {}
        for mode in ("grit", "lora_control"):
            run_dir = out_root / f"{mode}-s{seed}"
            record = run_experiment(make_config(mode, seed, args.steps), out_dir=run_dir)
            results[mode] = record
        g, c = results["grit"], results["lora_control"]
        rows.append(
            dict(
                seed=seed,
                grit_drift=g.delta_pt_loss,
                control_drift=c.delta_pt_loss,
                grit_task=g.final_task_loss,
                control_task=c.final_task_loss,
                grit_exposure=g.geometry_summary.curvature_exposure,
                control_exposure=c.geometry_summary.curvature_exposure,
                grit_k=g.geometry_summary.k_selected,
            )
        )
        print(
            f"seed {seed}: drift {g.delta_pt_loss:.4f} vs {c.delta_pt_loss:.4f} | "
            f"task {g.final_task_loss:.4f} vs {c.final_task_loss:.4f} | "
            f"exposure {g.geometry_summary.curvature_exposure:.1f} vs "
            f"{c.geometry_summary.curvature_exposure:.1f}"
        )

    summary = {
        "task": TASK,
        "seeds": args.seeds,
        "steps": args.steps,
        "median_grit_drift": float(np.median([r["grit_drift"] for r in rows])),
        "median_control_drift": float(np.median([r["control_drift"] for r in rows])),
        "median_grit_exposure": float(np.median([r["grit_exposure"] for r in rows])),
        "median_control_exposure": float(np.median([r["control_exposure"] for r in rows])),
        "rows": rows,
    }
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    print(
        f"\nmedian drift: {summary['median_grit_drift']:.4f} (geometry-aware) vs "
        f"{summary['median_control_drift']:.4f} (control)"
    )
    print(
        f"median exposure: {summary['median_grit_exposure']:.1f} vs "
        f"{summary['median_control_exposure']:.1f}"
    )
    print(f"summary written to {out_root / 'summary.json'}")


if __name__ == "__main__":
    main()
