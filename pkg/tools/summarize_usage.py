import json
import sys
from pathlib import Path

import pandas as pd

from pseudoscope.orchestrator import AblationConfig


def load_runs(runs_dir: Path) -> pd.DataFrame:
    """One row per run directory that has both state.json and usage.json."""
    rows = []
    for run_dir in sorted(p for p in runs_dir.iterdir() if p.is_dir()):
        state_path, usage_path = run_dir / "state.json", run_dir / "usage.json"
        if not (state_path.is_file() and usage_path.is_file()):
            print(f"Skipping {run_dir.name}: not a finished run directory", file=sys.stderr)
            continue
        state = json.loads(state_path.read_text(encoding="utf-8"))
        usage = json.loads(usage_path.read_text(encoding="utf-8"))
        rows.append(
            {
                "run_id": run_dir.name,
                "ablation": AblationConfig.model_validate(state["ablation"]).name,
                "iterations": state.get("iteration", 0),
                **usage,
            }
        )
    return pd.DataFrame(rows)


def summarize(runs: pd.DataFrame) -> pd.DataFrame:
    """Per-ablation totals and per-run means of tokens, calls, wall time and cost."""
    grouped = runs.groupby("ablation")
    summary = grouped[["input_tokens", "output_tokens", "calls", "wall_time", "cost_estimate"]].sum()
    summary["runs"] = grouped.size()
    summary["mean_cost"] = summary["cost_estimate"] / summary["runs"]
    summary["mean_wall_time"] = summary["wall_time"] / summary["runs"]
    # approximate counts taint the whole group
    summary["approximate"] = grouped["approximate"].any()
    return summary.reset_index()


if __name__ == "__main__":
    if len(sys.argv) not in (2, 3):
        print("Usage: python summarize_usage.py <runs_dir> [output.csv]", file=sys.stderr)
        sys.exit(1)

    runs_dir = Path(sys.argv[1])
    if not runs_dir.is_dir():
        print(f"Error: runs directory not found at {runs_dir}", file=sys.stderr)
        sys.exit(1)

    runs = load_runs(runs_dir)
    if runs.empty:
        print(f"No finished runs under {runs_dir}", file=sys.stderr)
        sys.exit(1)

    summary = summarize(runs)
    print(summary.to_string(index=False))
    if len(sys.argv) == 3:
        summary.to_csv(sys.argv[2], index=False)
        print(f"Wrote {sys.argv[2]}")
