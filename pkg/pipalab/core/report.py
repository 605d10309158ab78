"""
Plots and summaries of training runs.

Renders the value-likelihood and implicit-reward trajectories of one or more
runs as SVG (one line per run) and writes a plain-text summary.
"""

from pathlib import Path
from typing import Dict, List, Sequence, Union

import matplotlib

matplotlib.use("Agg")  # headless
import matplotlib.pyplot as plt  # noqa: E402

from pipalab.core.exceptions import MissingArtifactException  # noqa: E402
from pipalab.core.logger import get_cli_logger  # noqa: E402
from pipalab.core.trainer import MetricsLog  # noqa: E402

logger = get_cli_logger()

METRICS_FILE = "metrics.csv"


def _plot(runs: Dict[str, MetricsLog], columns: Sequence[str], ylabel: str, title: str, path: Path) -> None:
    with plt.rc_context({"svg.hashsalt": "pipalab", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        for name, log in runs.items():
            steps = log.column("step")
            for column in columns:
                values = log.column(column)
                points = [(s, v) for s, v in zip(steps, values) if v is not None]
                if points:
                    label = f"{name} {column}" if len(columns) > 1 else name
                    ax.plot([p[0] for p in points], [p[1] for p in points], label=label, linewidth=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        if ax.get_legend_handles_labels()[0]:
            ax.legend(fontsize="small")
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def load_runs(run_dirs: Sequence[Union[str, Path]]) -> Dict[str, MetricsLog]:
    """Metrics of each run directory, keyed by directory name."""
    runs: Dict[str, MetricsLog] = {}
    for run_dir in run_dirs:
        path = Path(run_dir) / METRICS_FILE
        if not path.exists():
            raise MissingArtifactException(str(path))
        name = Path(run_dir).resolve().name
        while name in runs:
            name += "'"
        runs[name] = MetricsLog.from_csv(path)
    return runs


def summary_text(runs: Dict[str, MetricsLog]) -> str:
    lines: List[str] = []
    for name, log in runs.items():
        if not log.rows:
            lines.append(f"{name}: no steps recorded")
            continue
        last = log.rows[-1]
        parts = [f"{name}: {len(log)} steps", f"final loss {last.loss:.6g}"]
        for column in ("value_geo_mean", "reward_pos", "reward_neg"):
            value = getattr(last, column)
            if value is not None:
                parts.append(f"final {column} {value:.6g}")
        parts.append(f"final clip_rate {last.clip_rate:.6g}")
        lines.append(", ".join(parts))
    return "\n".join(lines) + "\n"


def render_report(run_dirs: Sequence[Union[str, Path]], out_dir: Union[str, Path]) -> List[Path]:
    """
    Write value_trajectory.svg, reward_trajectory.svg and summary.txt.

    Returns:
        Paths of the written files
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = load_runs(run_dirs)
    value_path = out_dir / "value_trajectory.svg"
    reward_path = out_dir / "reward_trajectory.svg"
    summary_path = out_dir / "summary.txt"
    _plot(runs, ["value_geo_mean"], "geometric value likelihood", "Value model likelihood", value_path)
    _plot(runs, ["reward_pos", "reward_neg"], "log f(y|x) / prior(y|x)", "Implicit reward", reward_path)
    summary_path.write_text(summary_text(runs), encoding="utf-8")
    logger.info(f"Report for {len(runs)} run(s) written to {out_dir}")
    return [value_path, reward_path, summary_path]
