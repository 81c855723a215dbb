#!/usr/bin/env python3
"""Regenerate the committed reference artifacts in this directory.

The acceptance thresholds (forgetting magnitudes, replay retention, policy
ranking) were validated against these runs; the configurations live in
embercl.reference so the test suite and this script cannot drift apart.

Usage: python reference/make_reference_runs.py [out_dir]
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

from embercl import reference
from embercl.memory import BufferPolicy
from embercl.reporting import emit_report
from embercl.training import (
    TrainMode,
    permutation_sweep,
    policy_ranking,
    train_continual,
    train_supervised,
)


def main() -> None:
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parent
    out.mkdir(parents=True, exist_ok=True)

    joint_ds = reference.joint_dataset()
    _, joint_report = train_supervised(joint_ds, reference.joint_config(joint_ds))
    emit_report(joint_report.without_timing(), "json", out / "joint_supervised.report.json")
    print(f"joint supervised overall: {joint_report.overall:.2f}")

    forget_ds = reference.forgetting_dataset()
    _, noreplay = train_continual(
        forget_ds, reference.forgetting_config(forget_ds, TrainMode.CONTINUAL_NOREPLAY)
    )
    emit_report(noreplay.without_timing(), "json", out / "continual_noreplay.report.json")
    _, replay = train_continual(
        forget_ds,
        reference.forgetting_config(forget_ds, TrainMode.CONTINUAL, BufferPolicy.RESERVOIR),
    )
    emit_report(replay.without_timing(), "json", out / "continual_reservoir.report.json")
    drop_no = noreplay.accuracy_matrix[0][0] - noreplay.accuracy_matrix[-1][0]
    drop_res = replay.accuracy_matrix[0][0] - replay.accuracy_matrix[-1][0]
    print(f"first-task drop without replay: {drop_no:.1f}; with reservoir replay: {drop_res:.1f}")

    sweep_ds = reference.sweep_dataset()
    summary = []
    for master_seed in reference.SWEEP_MASTER_SEEDS:
        base = reference.sweep_base_config(sweep_ds, master_seed)
        result = permutation_sweep(sweep_ds, base, parallel=True)
        ranking = policy_ranking(result)
        summary.append(
            {
                "master_seed": master_seed,
                "aggregate": result.aggregate,
                "policy_ranking": [
                    {"policy": p, "mean_average_accuracy": v} for p, v in ranking
                ],
            }
        )
        print(f"sweep master {master_seed}: " + ", ".join(f"{p}={v:.2f}" for p, v in ranking))
    (out / "sweep_rankings.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"artifacts written to {out}")


if __name__ == "__main__":
    main()
