"""
Utils - Excel Exporter
======================
Writes the experiment and scan tables built by report_service.py into
formatted .xlsx workbooks, returned as bytes for the CLI and for Streamlit
downloads.
"""

import io
from datetime import date

import pandas as pd
from openpyxl import Workbook
from openpyxl.styles import (
    Alignment,
    Border,
    Font,
    PatternFill,
    Side,
)
from openpyxl.utils import get_column_letter

# ---------------------------------------------------------------------------
# Theme / Style constants
# ---------------------------------------------------------------------------

MAIN_COLOR = "3B82F6"
CONTRAST_COLOR = "0B2545"
ACCENT_COLOR = "F97316"
HEADER_FILL_COLOR = "E6F0FF"
ROW_FILL_ODD_COLOR = "F2F7FF"
BORDER_COLOR = "D6E4FF"
DANGER_COLOR = "C62828"
NEUTRAL_COLOR = "4B5563"

FONT_NAME = "Calibri"

_HEADER_FILL = PatternFill(fill_type="solid", fgColor=HEADER_FILL_COLOR)
_HEADER_FONT = Font(name=FONT_NAME, bold=True, color=CONTRAST_COLOR, size=10)
_LABEL_FONT = Font(name=FONT_NAME, bold=True, size=10, color=CONTRAST_COLOR)
_VALUE_FONT = Font(name=FONT_NAME, size=10, color=CONTRAST_COLOR)
_SECTION_FONT = Font(name=FONT_NAME, bold=True, size=12, color=ACCENT_COLOR)
_ACCENT_FILL = PatternFill(fill_type="solid", fgColor=CONTRAST_COLOR)
_ACCENT_FONT = Font(name=FONT_NAME, bold=True, color="FFFFFF", size=14)
_FLAG_FONT = Font(name=FONT_NAME, bold=True, color=DANGER_COLOR, size=10)
_NEUTRAL_FONT = Font(name=FONT_NAME, color=NEUTRAL_COLOR, size=10)

_ROW_FILL_ODD = PatternFill(fill_type="solid", fgColor=ROW_FILL_ODD_COLOR)
_THIN_BORDER_SIDE = Side(style="thin", color=BORDER_COLOR)
_CELL_BORDER = Border(
    left=_THIN_BORDER_SIDE,
    right=_THIN_BORDER_SIDE,
    top=_THIN_BORDER_SIDE,
    bottom=_THIN_BORDER_SIDE,
)

NO_DATA = "No data"


# ---------------------------------------------------------------------------
# Low-level helpers
# ---------------------------------------------------------------------------

def _apply_header_row(ws, row: int, columns: list[str]) -> None:
    for col_idx, col_name in enumerate(columns, start=1):
        cell = ws.cell(row=row, column=col_idx, value=col_name)
        cell.font = _HEADER_FONT
        cell.fill = _HEADER_FILL
        cell.alignment = Alignment(horizontal="center", vertical="center")
        cell.border = _CELL_BORDER


def _cell_value(value):
    if value is None or (isinstance(value, float) and pd.isna(value)):
        return None
    if isinstance(value, pd.Timestamp):
        return value.tz_localize(None).to_pydatetime() if value.tzinfo else value.to_pydatetime()
    return value


def _write_dataframe(ws, df: pd.DataFrame | None, start_row: int, highlight_column: str | None = None) -> int:
    """Write a DataFrame with header + alternating rows. Returns next empty row."""
    if df is None or df.empty:
        ws.cell(row=start_row, column=1, value=NO_DATA).font = _NEUTRAL_FONT
        return start_row + 2

    columns = list(df.columns)
    _apply_header_row(ws, start_row, columns)
    highlight_idx = columns.index(highlight_column) + 1 if highlight_column in columns else None

    for row_idx, row_data in enumerate(df.itertuples(index=False), start=start_row + 1):
        fill = _ROW_FILL_ODD if row_idx % 2 == 0 else None
        for col_idx, value in enumerate(row_data, start=1):
            cell = ws.cell(row=row_idx, column=col_idx, value=_cell_value(value))
            cell.font = _VALUE_FONT
            cell.border = _CELL_BORDER
            cell.alignment = Alignment(horizontal="center", vertical="center")
            if fill:
                cell.fill = fill
            if col_idx == highlight_idx and isinstance(value, (int, float)) and value > 0:
                cell.font = _FLAG_FONT

    return start_row + len(df) + 2


def _auto_column_widths(ws, min_width: int = 12, max_width: int = 48) -> None:
    for col in ws.columns:
        max_len = max(
            (len(str(cell.value)) for cell in col if cell.value is not None),
            default=min_width,
        )
        ws.column_dimensions[get_column_letter(col[0].column)].width = min(
            max(max_len + 4, min_width), max_width
        )


def _write_section_title(ws, row: int, title: str) -> None:
    cell = ws.cell(row=row, column=1, value=title)
    cell.font = _SECTION_FONT
    cell.alignment = Alignment(vertical="center")


def _add_cover_info(ws, title: str, details: dict) -> int:
    """Title bar and key/value lines; returns the next free row."""
    ws.row_dimensions[1].height = 30
    title_cell = ws.cell(row=1, column=1, value=title)
    title_cell.font = _ACCENT_FONT
    title_cell.fill = _ACCENT_FILL
    title_cell.alignment = Alignment(horizontal="left", vertical="center")

    row = 2
    for label, value in {**details, "Generated": str(date.today())}.items():
        ws.cell(row=row, column=1, value=f"{label}:").font = _LABEL_FONT
        ws.cell(row=row, column=2, value=str(value)).font = _VALUE_FONT
        row += 1
    return row + 1


def _table_sheet(wb: Workbook, title: str, df: pd.DataFrame | None, highlight_column: str | None = None) -> None:
    ws = wb.create_sheet(title)
    _write_section_title(ws, 1, title)
    _write_dataframe(ws, df, start_row=3, highlight_column=highlight_column)
    _auto_column_widths(ws)


def _to_bytes(wb: Workbook) -> bytes:
    buffer = io.BytesIO()
    wb.save(buffer)
    buffer.seek(0)
    return buffer.read()


# ---------------------------------------------------------------------------
# Public exporters
# ---------------------------------------------------------------------------

def export_experiment_report(table: pd.DataFrame, long_frame: pd.DataFrame, details: dict | None = None) -> bytes:
    """
    Experiment workbook.

    Args:
        table: report_service.experiment_table() output ("mean ± std" cells).
        long_frame: report_service.experiment_frame() output (numeric).
        details: cover lines such as folds, repeats and seed.
    """
    wb = Workbook()
    ws = wb.active
    ws.title = "Summary"
    row = _add_cover_info(ws, "Cross-validation results", details or {})
    _write_section_title(ws, row, "Mean ± std (%) per learner and setting")
    _write_dataframe(ws, table, start_row=row + 1)
    _auto_column_widths(ws)

    _table_sheet(wb, "Metrics", long_frame)
    return _to_bytes(wb)


def export_scan_report(report: dict, details: dict | None = None) -> bytes:
    """
    Scan workbook from report_service.build_scan_report().

    Sheets: Summary (verdict counts), Models, Daily, Flagged.
    """
    wb = Workbook()
    ws = wb.active
    ws.title = "Summary"
    row = _add_cover_info(ws, "Package scan report", details or {})
    _write_section_title(ws, row, "Verdicts per ecosystem")
    _write_dataframe(ws, report.get("counts"), start_row=row + 1, highlight_column="flagged")
    _auto_column_widths(ws)

    _table_sheet(wb, "Models", report.get("models"), highlight_column="flagged")
    _table_sheet(wb, "Daily", report.get("daily"), highlight_column="flagged")
    _table_sheet(wb, "Flagged", report.get("flagged"))
    return _to_bytes(wb)


def save_workbook(content: bytes, path) -> None:
    with open(path, "wb") as handle:
        handle.write(content)
