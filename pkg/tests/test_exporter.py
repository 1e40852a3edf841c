import pandas as pd
from openpyxl import load_workbook

from app.schemas import MetricReport
from app.services.exporter import COLUMNS, comparison_frame, failed_row, report_row, to_text_table, write_comparison


def _report(method, **kwargs):
    return MetricReport(method=method, n_views=4, config_hash="0123456789abcdef", **kwargs)


def test_report_row_formats_values():
    row = report_row(_report("sds", psnr_db=24.123456, niqe=None, perc_proxy=0.5), run_dir="runs/sds")
    assert row["psnr_db"] == "24.1235"
    assert row["niqe"] == "n/a"
    assert row["perc_proxy"] == "0.500000"
    assert row["config_hash"] == "0123456789ab"
    assert report_row(_report("identity", psnr_infinite=True))["psnr_db"] == "inf"


def test_comparison_frame_sorts_by_method():
    rows = [
        report_row(_report("vsd_lora_spaced"), "b"),
        failed_row("sds", "runs/sds", "missing field_sr.bin"),
        report_row(_report("bicubic"), "a"),
        report_row(_report("sds"), "a"),
    ]
    df = comparison_frame(rows)
    assert list(df.columns) == COLUMNS
    assert list(df["method"]) == ["bicubic", "sds", "sds", "vsd_lora_spaced"]
    assert list(df["run_dir"])[1:3] == ["a", "runs/sds"]
    assert df.loc[2, "psnr_db"] == "FAILED"
    assert df.loc[2, "status"].startswith("FAILED: missing")


def test_text_table_layout():
    assert to_text_table(comparison_frame([])) == "(no runs)"
    text = to_text_table(comparison_frame([report_row(_report("sds"), "runs/sds")]))
    header, line = text.splitlines()
    assert header.split() == ["method", "psnr_db", "niqe", "perc_proxy", "n_views", "status", "run_dir"]
    assert line.split()[:2] == ["sds", "n/a"]
    assert "0123456789ab" not in text, "the config hash stays out of the text table"


def test_write_comparison_files(tmp_path):
    rows = [report_row(_report("sds"), "runs/sds"), failed_row("vsd_lora", "runs/vsd", "diverged")]
    paths = write_comparison(rows, tmp_path / "out")
    assert [p.name for p in paths] == ["comparison.csv", "comparison.txt", "comparison.xlsx"]
    assert all(p.is_file() for p in paths)
    csv = pd.read_csv(paths[0], keep_default_na=False)
    assert list(csv["method"]) == ["sds", "vsd_lora"]
    ws = load_workbook(paths[2])["Comparison"]
    assert ws.freeze_panes == "A2"
    assert ws.cell(row=1, column=1).font.bold
    assert ws.cell(row=3, column=1).fill.start_color.rgb.endswith("FFC7CE"), "failed runs are highlighted"
    assert not ws.cell(row=2, column=1).fill.start_color.rgb.endswith("FFC7CE")
