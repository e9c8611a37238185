# Storage service
import csv
import json
import logging
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

from src.sim import RunResult
from utils.hash import scenario_digest

# Configure logger
logger = logging.getLogger(__name__)

TRAJECTORY_CSV = "trajectory.csv"
ERRORS_CSV = "errors.csv"
SUMMARY_CSV = "summary.csv"
LYAPUNOV_CSV = "lyapunov.csv"
RUN_JSON = "run.json"


def fmt(value: Optional[float]) -> str:
    """17 significant digits, empty for missing values."""
    if value is None:
        return ""
    return f"{float(value):.17g}"


def _write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    logger.info(f"wrote {path}")


def trajectory_rows(result: RunResult) -> List[List[str]]:
    """t, then p/v/a of the leader and p/v/a/u of each follower (u empty on the last row)."""
    history = result.history
    n = result.config.n_followers
    steps = history.inputs.shape[0]
    rows = []
    for t, time in enumerate(history.times):
        row = [fmt(time)] + [fmt(x) for x in history.states[t, 0]]
        for i in range(1, n + 1):
            row += [fmt(x) for x in history.states[t, i]]
            row.append(fmt(history.inputs[t, i - 1]) if t < steps else "")
        rows.append(row)
    return rows


def trajectory_header(n: int) -> List[str]:
    header = ["t", "p_0", "v_0", "a_0"]
    for i in range(1, n + 1):
        header += [f"p_{i}", f"v_{i}", f"a_{i}", f"u_{i}"]
    return header


def write_run(result: RunResult, out_dir: Path) -> Path:
    """Write the four CSVs and run.json into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = result.config.n_followers
    metrics = result.metrics

    _write_rows(out_dir / TRAJECTORY_CSV, trajectory_header(n), trajectory_rows(result))

    header = ["t"] + [f"{kind}_{i}" for i in range(1, n + 1) for kind in ("spacing_error", "velocity_error")]
    rows = []
    for t, time in enumerate(metrics.times):
        row = [fmt(time)]
        for i in range(n):
            row += [fmt(metrics.spacing_errors[t, i]), fmt(metrics.velocity_errors[t, i])]
        rows.append(row)
    _write_rows(out_dir / ERRORS_CSV, header, rows)

    fields = ["spacing_rmse", "spacing_max_abs", "velocity_rmse", "velocity_max_abs"]
    summaries = metrics.summaries()
    rows = [[str(s.vehicle)] + [fmt(getattr(s, f)) for f in fields] for s in summaries]
    columns = {f: [getattr(s, f) for s in summaries] for f in fields}
    # box-plot rows cover vehicles 2..N
    boxes = {f: metrics.trailing_quartiles(columns[f]) for f in fields}
    for label, idx in (("min", 0), ("q1", 1), ("median", 2), ("q3", 3), ("max", 4)):
        rows.append([label] + [fmt(boxes[f][idx] if boxes[f] else None) for f in fields])
    _write_rows(out_dir / SUMMARY_CSV, ["vehicle"] + fields, rows)

    header = ["t"] + [f"V_{i}" for i in range(1, n + 1)] + ["V", "dV", "bound", "eps_sum", "shifted_residual",
                                                           "monitored", "ok"]
    rows = []
    for row in result.lyapunov:
        rows.append([str(row.timestep)] + [fmt(row.values[i]) for i in range(1, n + 1)]
                    + [fmt(row.total), fmt(row.delta), fmt(row.bound), fmt(row.epsilon_sum),
                       fmt(row.shifted_residual), str(int(row.monitored)), "" if row.ok is None else str(int(row.ok))])
    _write_rows(out_dir / LYAPUNOV_CSV, header, rows)

    scenario = result.config.model_dump(mode="json")
    document = {
        "scenario": scenario,
        "fingerprint": scenario_digest(scenario),
        "taus": [float(x) for x in result.taus],
        "weight_condition_passed": result.weight_report.passed,
    }
    path = out_dir / RUN_JSON
    with open(path, "w") as f:
        json.dump(document, f, indent=2, sort_keys=True)
    logger.info(f"wrote {path}")
    return out_dir
