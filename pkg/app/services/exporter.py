from io import BytesIO
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd
from openpyxl.styles import Font, PatternFill
from openpyxl.utils import get_column_letter

from app.schemas import MetricReport

COLUMNS = ["method", "psnr_db", "niqe", "perc_proxy", "n_views", "status", "run_dir", "config_hash"]
NOT_AVAILABLE = "n/a"
FAILED = "FAILED"


def _fmt(value: Optional[float], digits: int = 4) -> str:
    return NOT_AVAILABLE if value is None else f"{value:.{digits}f}"


def report_row(report: MetricReport, run_dir: str = "") -> Dict:
    psnr = "inf" if report.psnr_infinite else _fmt(report.psnr_db)
    return {
        "method": report.method,
        "psnr_db": psnr,
        "niqe": _fmt(report.niqe),
        "perc_proxy": _fmt(report.perc_proxy, 6),
        "n_views": report.n_views,
        "status": "ok",
        "run_dir": run_dir,
        "config_hash": report.config_hash[:12],
    }


def failed_row(method: str, run_dir: str, reason: str) -> Dict:
    return {
        "method": method,
        "psnr_db": FAILED,
        "niqe": FAILED,
        "perc_proxy": FAILED,
        "n_views": 0,
        "status": f"{FAILED}: {reason}",
        "run_dir": run_dir,
        "config_hash": "",
    }


def comparison_frame(rows: Sequence[Dict]) -> pd.DataFrame:
    """One row per method, ordered by method name (then run dir)."""
    df = pd.DataFrame(list(rows), columns=COLUMNS)
    if not df.empty:
        df = df.sort_values(by=["method", "run_dir"], kind="mergesort").reset_index(drop=True)
    return df


def to_text_table(df: pd.DataFrame) -> str:
    if df.empty:
        return "(no runs)"
    return df.to_string(index=False, columns=[c for c in COLUMNS if c != "config_hash"], justify="left")


def _apply_comparison_formatting(ws):
    fill_failed = PatternFill(start_color="FFC7CE", end_color="FFC7CE", fill_type="solid")  # red
    fill_header = PatternFill(start_color="EEEEEE", end_color="EEEEEE", fill_type="solid")  # gray
    bold_font = Font(bold=True)
    headers = {ws.cell(row=1, column=c).value: c for c in range(1, ws.max_column + 1)}
    if not headers:
        return
    ws.freeze_panes = "A2"
    ws.auto_filter.ref = ws.dimensions
    for h, c in headers.items():
        ws.cell(row=1, column=c).fill = fill_header
        ws.cell(row=1, column=c).font = bold_font
        width = 12
        if h in ("method", "config_hash"):
            width = 20
        if h in ("status", "run_dir"):
            width = 40
        ws.column_dimensions[get_column_letter(c)].width = width
    col_status = headers.get("status")
    for r in range(2, ws.max_row + 1):
        status = ws.cell(row=r, column=col_status).value if col_status else None
        if status and str(status).startswith(FAILED):
            for c in headers.values():
                ws.cell(row=r, column=c).fill = fill_failed


def build_comparison_excel(df: pd.DataFrame) -> BytesIO:
    buf = BytesIO()
    with pd.ExcelWriter(buf, engine="openpyxl") as writer:
        (df if not df.empty else pd.DataFrame(columns=COLUMNS)).to_excel(writer, index=False, sheet_name="Comparison")
        ws = writer.sheets.get("Comparison")
        if ws is not None:
            _apply_comparison_formatting(ws)
    buf.seek(0)
    return buf


def write_comparison(rows: Sequence[Dict], out_dir: str | Path, stem: str = "comparison") -> List[Path]:
    """Writes <stem>.csv, <stem>.txt and <stem>.xlsx; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    df = comparison_frame(rows)
    csv_path = out_dir / f"{stem}.csv"
    df.to_csv(csv_path, index=False)
    txt_path = out_dir / f"{stem}.txt"
    txt_path.write_text(to_text_table(df) + "\n")
    xlsx_path = out_dir / f"{stem}.xlsx"
    xlsx_path.write_bytes(build_comparison_excel(df).getvalue())
    return [csv_path, txt_path, xlsx_path]
