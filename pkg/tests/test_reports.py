import math

import pandas as pd
import pytest

from reports.charts import bar_chart, comparison_table, format_comparison, line_chart, read_csv, read_schema, write_csv


@pytest.fixture
def results():
    return pd.DataFrame([
        {"model": "givt", "seed": 0, "FED": 2.0, "FED_acc": 4.0},
        {"model": "cam", "seed": 0, "FED": 1.0, "FED_acc": 1.5},
        {"model": "givt", "seed": 1, "FED": 4.0, "FED_acc": 6.0},
        {"model": "cam", "seed": 1, "FED": float("nan"), "FED_acc": float("nan")},
        {"model": "mar_rf", "seed": 0, "FED": float("nan"), "FED_acc": float("nan")},
    ])


def test_csv_schema_line(tmp_path):
    frame = pd.DataFrame({"step": [1, 2], "loss": [0.5, 0.25]})
    path = write_csv(frame, tmp_path / "out" / "m.csv", "train_metrics/1")
    assert path.read_text().splitlines()[0] == "# schema: train_metrics/1"
    assert read_schema(path) == "train_metrics/1"
    pd.testing.assert_frame_equal(read_csv(path), frame)


def test_read_csv_without_schema(tmp_path):
    path = tmp_path / "plain.csv"
    path.write_text("a,b\n1,2\n")
    assert read_schema(path) is None
    assert read_csv(path)["b"].tolist() == [2]


def test_comparison_keeps_first_appearance_order(results):
    table = comparison_table(results)
    assert table["model"].tolist() == ["givt", "cam", "mar_rf"]
    givt = table.iloc[0]
    assert givt["FED_mean"] == 3.0
    assert givt["FED_std"] == 1.0
    assert givt["seeds"] == "0 1"
    assert givt["failed"] == 0


def test_failed_cells_leave_gaps(results):
    table = comparison_table(results)
    cam = table.iloc[1]
    assert cam["FED_mean"] == 1.0
    assert cam["FED_std"] == 0.0
    assert cam["failed"] == 1
    assert math.isnan(table.iloc[2]["FED_acc_mean"])


def test_format_comparison(results):
    shown = format_comparison(comparison_table(results))
    assert shown["FED"].tolist() == ["3.0000 ± 1.0000", "1.0000 ± 0.0000", "n/a"]
    assert list(shown.columns) == ["model", "FED", "FED_acc", "seeds"]


def test_charts_render_svg(tmp_path, results):
    pytest.importorskip("kaleido")
    table = comparison_table(results)
    bar = bar_chart(table, "model", ["FED_mean", "FED_acc_mean"], tmp_path / "bar.svg",
                    errors={"FED_mean": "FED_std"})
    line = line_chart(pd.DataFrame({"k_inf": [0.0, 0.01], "FED": [1.0, 0.8]}), "k_inf", ["FED"], tmp_path / "line.svg")
    if bar is None or line is None:
        pytest.skip("static image export unavailable in this environment")
    assert "<svg" in bar.read_text()
    assert "<svg" in line.read_text()


def test_chart_failure_is_not_fatal(tmp_path, monkeypatch, results):
    import plotly.graph_objects as go

    def broken(self, *args, **kwargs):
        raise RuntimeError("no renderer")

    monkeypatch.setattr(go.Figure, "write_image", broken)
    assert line_chart(comparison_table(results), "model", ["FED_mean"], tmp_path / "x.svg") is None


def test_selected_denoising_steps_are_listed(results):
    results["num_steps"] = [None, 25, None, 50, 10]
    table = comparison_table(results)
    assert table["num_steps"].tolist() == ["", "25 50", "10"]
    assert format_comparison(table)["num_steps"].tolist() == ["", "25 50", "10"]
