"""
Scan Results Tab
================
Verdict counts per ecosystem, flagged counts per model, the daily trend and
the flagged-package list with the features that drove each verdict.
"""

import streamlit as st

from service.report_service import build_scan_report
from ui.components import (
    create_download_button,
    create_excel_download_button,
    show_dataframe,
    show_info_message,
    show_metric_card,
)
from ui.filters import render_date_filter_from_df, render_multi_select
from ui.visualizations import plot_bar_chart, plot_feature_bars, plot_line_chart
from utils.date_helpers import filter_by_date_range
from utils.excel_exporter import export_scan_report


@st.cache_data(show_spinner=False, ttl=300)
def build_scan_report_cached(records: list) -> dict:
    return build_scan_report(records)


@st.cache_data(show_spinner=False, ttl=300)
def export_scan_report_cached(records: list, period_label: str) -> bytes:
    return export_scan_report(build_scan_report(records), {"Period": period_label})


def _filter_records(records: list, verdicts_df, start_date, end_date, ecosystems) -> list:
    """Records whose verdict row survives the date and ecosystem filters."""
    if verdicts_df is None or verdicts_df.empty:
        return []
    kept = filter_by_date_range(verdicts_df, "scanned_at", start_date, end_date)
    kept = kept[kept["ecosystem"].isin(ecosystems)]
    return [records[i] for i in kept.index]


def render_tab_scan_results():
    st.header("🛡️ Scan results")

    records = st.session_state.get("sink_records") or []
    verdicts_df = st.session_state.get("verdicts_df")
    if not records:
        show_info_message("No verdicts yet. Run `python cli.py scan` or `watch` to fill the sink directory.")
        return

    start_date, end_date = render_date_filter_from_df(verdicts_df, "scanned_at", key_prefix="scan")
    ecosystems = render_multi_select("Ecosystem", verdicts_df, "ecosystem", key="scan_ecosystems")
    filtered = _filter_records(records, verdicts_df, start_date, end_date, ecosystems)
    if not filtered:
        show_info_message("No verdicts match the selected filters.")
        return

    report = build_scan_report_cached(filtered)
    counts = report["counts"]
    total = counts[counts["ecosystem"] == "total"].iloc[0]

    col1, col2, col3, col4 = st.columns(4)
    with col1:
        show_metric_card("Scanned", int(total["scanned"]))
    with col2:
        show_metric_card("Benign", int(total["benign"]))
    with col3:
        show_metric_card("Flagged", int(total["flagged"]))
    with col4:
        show_metric_card("Errors", int(total["errors"]))

    period_label = f"{start_date} - {end_date}"
    create_excel_download_button(
        export_scan_report_cached(filtered, period_label),
        f"scan_report_{start_date}_{end_date}.xlsx",
        key="scan_excel",
    )

    st.markdown("---")
    show_dataframe(counts, title="Verdicts per ecosystem")
    plot_bar_chart(report["models"], "model_id", "flagged", "Flagged packages per model",
                   color="ecosystem", sort_key="models")
    show_dataframe(report["models"], title="Models")

    st.markdown("---")
    plot_line_chart(report["daily"], "date", "flagged", "Flagged per day", color="ecosystem")

    st.markdown("---")
    flagged = report["flagged"]
    show_dataframe(flagged, title="Flagged packages")
    create_download_button(flagged, f"flagged_{start_date}_{end_date}.csv", key="flagged_csv")

    if not flagged.empty:
        labels = [f"{row.ecosystem}/{row.name} {row.version}" for row in flagged.itertuples(index=False)]
        choice = st.selectbox("Explain package", labels, key="scan_explain")
        chosen = next(
            r for r in filtered
            if f"{r.get('ecosystem')}/{r.get('name')} {r.get('version')}" == choice
        )
        plot_feature_bars([tuple(pair) for pair in chosen.get("top_features") or []], f"Top features: {choice}")
