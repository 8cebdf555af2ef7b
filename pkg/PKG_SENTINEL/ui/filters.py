"""
Filters
=======
Reusable filtering components for the dashboard UI.
"""

import pandas as pd
import streamlit as st

from utils.date_helpers import get_default_date_range


def _date_bounds(df: pd.DataFrame | None, date_col: str):
    """(min, max) dates of a column, falling back to the default window."""
    if df is None or df.empty or date_col not in df.columns:
        return get_default_date_range()

    series = pd.to_datetime(df[date_col], errors="coerce", utc=True).dropna()
    if series.empty:
        return get_default_date_range()
    return series.min().date(), series.max().date()


def render_date_filter_from_df(df: pd.DataFrame | None, date_col: str, key_prefix: str = ""):
    """Date range inputs bounded by the dataframe's own dates."""
    min_date, max_date = _date_bounds(df, date_col)
    col1, col2 = st.columns(2)
    with col1:
        start_date = st.date_input("From", value=min_date, key=f"{key_prefix}_start_date")
    with col2:
        end_date = st.date_input("To", value=max_date, key=f"{key_prefix}_end_date")
    return start_date, end_date


def render_multi_select(label: str, df: pd.DataFrame | None, column: str, key: str) -> list[str]:
    """Multiselect over the distinct values of ``column``; all selected by default."""
    if df is None or df.empty or column not in df.columns:
        return []
    options = sorted(df[column].dropna().astype(str).unique().tolist())
    return st.multiselect(label, options=options, default=options, key=key)
