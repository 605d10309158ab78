"""
Tests for run plots and summaries.
"""

import pytest

from pipalab.core.exceptions import MissingArtifactException
from pipalab.core.report import load_runs, render_report, summary_text
from pipalab.core.trainer import MetricsLog
from pipalab.models.models import MetricsRow


def _write_run(directory, geo=True):
    rows = [
        MetricsRow(step=s, epoch=0, loss=1.0 / (s + 1), value_geo_mean=0.5 + 0.1 * s if geo else None,
                   reward_pos=0.1 * s, reward_neg=-0.1 * s, clip_rate=0.0)
        for s in range(4)
    ]
    MetricsLog(rows).to_csv(directory / "metrics.csv")
    return directory


@pytest.mark.unit
class TestReport:
    def test_writes_svgs_and_summary(self, tmp_path):
        run = _write_run(tmp_path / "pipa")
        paths = render_report([run], tmp_path / "report")
        assert [p.name for p in paths] == ["value_trajectory.svg", "reward_trajectory.svg", "summary.txt"]
        assert all(p.exists() for p in paths)
        assert paths[0].read_text(encoding="utf-8").lstrip().startswith("<?xml")

    def test_svg_is_reproducible(self, tmp_path):
        run = _write_run(tmp_path / "pipa")
        first = render_report([run], tmp_path / "a")[1].read_bytes()
        second = render_report([run], tmp_path / "b")[1].read_bytes()
        assert first == second

    def test_overlay_names(self, tmp_path):
        runs = load_runs([_write_run(tmp_path / "pipa"), _write_run(tmp_path / "dpo", geo=False)])
        assert list(runs) == ["pipa", "dpo"]
        text = summary_text(runs)
        assert "pipa: 4 steps" in text
        assert "value_geo_mean" not in text.splitlines()[1]

    def test_missing_metrics(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(MissingArtifactException):
            render_report([tmp_path / "empty"], tmp_path / "report")

    def test_header_only_metrics(self, tmp_path):
        run = tmp_path / "empty"
        MetricsLog().to_csv(run / "metrics.csv")
        paths = render_report([run], tmp_path / "report")
        assert paths[0].exists()
        assert "no steps recorded" in paths[2].read_text(encoding="utf-8")
