from __future__ import annotations

from importlib import resources

import matplotlib.pyplot as plt
import numpy as np
import pytest

from shortmr import schemas
from shortmr.cli import main
from shortmr.io import read_json
from shortmr.pipeline import STAGES
from shortmr.plots import rank_figure

SMOKE = str(resources.files("shortmr") / "configs" / "smoke.cfg")

REPORTS = {
    "curate/baseline.json": "dataset_pair",
    "curate/biased.json": "dataset_pair",
    "curate/attribute.json": "dataset_pair",
    "curate/audit.json": "audit",
    "train/evaluation.json": "evaluation",
    "attribute/attributions.json": "attributions",
    "analyze/rank_report.json": "rank_report",
    "analyze/stability.json": "stability",
    "report/summary.json": "summary",
}


def run(cmd, out, *extra):
    return main([cmd, "--config", SMOKE, "--out", str(out), *extra])


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke") / "run"
    codes = [run(cmd, out) for cmd in STAGES]
    return out, codes


class TestSmokeChain:
    def test_all_stages_succeed(self, smoke):
        _, codes = smoke
        assert codes == [0] * len(STAGES)

    def test_reports_validate(self, smoke):
        out, _ = smoke
        for rel, kind in REPORTS.items():
            schemas.validate(read_json(out / rel), kind)

    def test_rank_report_bounds(self, smoke):
        out, _ = smoke
        r = read_json(out / "analyze/rank_report.json")
        assert r["rho"] is None or -1.0 <= r["rho"] <= 1.0
        assert 0.0 < r["p_perm"] <= 1.0
        assert len(r["top_regions"]) == 3

    def test_compositions_recompose_cohort(self, smoke):
        out, _ = smoke
        audit = read_json(out / "curate/audit.json")
        assert audit["passed"]
        totals = audit["cohort_totals"]
        for name, table in audit["compositions"].items():
            for dx in ("CN", "AD"):
                for key in ("S", "N"):
                    got = np.sum([table[s][dx][key] for s in ("train", "val", "test")], axis=0)
                    got = got + audit["unused"][name][dx][key]
                    assert got.tolist() == totals[dx][key], (name, dx, key)

    def test_stability_radius_zero(self, smoke):
        out, _ = smoke
        curves = read_json(out / "analyze/stability.json")["curves"]
        assert set(curves) == {"baseline", "biased"}
        for curve in curves.values():
            assert curve[0] == {"radius": 0, "stability": 1.0}

    def test_figures_written(self, smoke):
        out, _ = smoke
        summary = read_json(out / "report/summary.json")
        for name in summary["figures"]:
            assert (out / "report" / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        assert summary["planted_attr_regions"] == [3]

    def test_write_once(self, smoke, capsys):
        out, _ = smoke
        assert run("curate", out) == 1
        assert "already exists" in capsys.readouterr().err


class TestErrors:
    def test_analyze_before_attribute(self, tmp_path, capsys):
        out = tmp_path / "run"
        for cmd in ("generate", "curate", "train"):
            assert run(cmd, out) == 0
        assert run("analyze", out) == 1
        assert "attribution volumes not found; run attribute" in capsys.readouterr().err

    def test_curate_without_cohort(self, tmp_path, capsys):
        assert run("curate", tmp_path / "empty") == 1
        assert "run generate" in capsys.readouterr().err

    def test_bad_config(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("seed = 1\noutput_dir = x\ntrain.lr = fast\n")
        assert main(["generate", "--config", str(cfg)]) == 1
        assert "'train.lr'" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["generate", "--config", str(tmp_path / "nope.cfg")]) == 1

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as info:
            main(["deploy", "--config", SMOKE])
        assert info.value.code == 2

    def test_seed_override_changes_cohort(self, tmp_path):
        assert run("generate", tmp_path / "a", "--seed", "3") == 0
        assert run("generate", tmp_path / "b", "--seed", "4") == 0
        a = (tmp_path / "a/cohort/volumes").iterdir()
        first = sorted(a)[0]
        assert first.read_bytes() != (tmp_path / "b/cohort/volumes" / first.name).read_bytes()


class TestRankFigure:
    def ranks(self, rho):
        return {
            "B": [0.0, 0.0, 0.0], "P": [1.0, -1.0, 0.0], "region_ids": [1, 2, 3], "top_regions": [2],
            "rho": rho, "p_perm": 1.0 if rho is None else 0.5,
        }

    def test_degenerate_annotated(self):
        fig = rank_figure(self.ranks(None))
        texts = [t.get_text() for t in fig.axes[0].texts] + [fig.axes[0].get_title()]
        plt.close(fig)
        assert "undefined correlation" in texts

    def test_defined_shows_values(self):
        fig = rank_figure(self.ranks(0.25))
        title = fig.axes[0].get_title()
        plt.close(fig)
        assert title == "rho = 0.250, p_perm = 0.500"


@pytest.mark.slow
def test_desk_chain(tmp_path):
    desk = str(resources.files("shortmr") / "configs" / "desk.cfg")
    out = tmp_path / "desk"
    assert [main([cmd, "--config", desk, "--out", str(out)]) for cmd in STAGES] == [0] * len(STAGES)
    r = read_json(out / "analyze/rank_report.json")
    schemas.validate(r, "rank_report")
    assert r["rho"] is None or -1.0 <= r["rho"] <= 1.0
