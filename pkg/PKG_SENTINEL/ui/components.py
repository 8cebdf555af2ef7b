"""
Reusable UI Components
================================
Common Streamlit components for use throughout the dashboard.
"""

import streamlit as st

XLSX_MIME = "application/vnd.openxmlformats-officedocument.spreadsheetml.sheet"


def show_metric_card(label, value, delta=None, delta_color="normal"):
    st.metric(label=label, value=value, delta=delta, delta_color=delta_color)


def show_dataframe(df, title=None, width="stretch"):
    if title:
        st.subheader(title)

    if df is None or df.empty:
        st.info("Nothing to show.")
        return

    st.dataframe(df, width=width)


def show_warning_message(message):
    st.warning(f"⚠️ {message}")


def show_info_message(message):
    st.info(f"ℹ️ {message}")


def create_download_button(df, filename, label="📥 Download CSV", key=None):
    if df is None or df.empty:
        return

    csv = df.to_csv(index=False).encode("utf-8")
    st.download_button(label=label, data=csv, file_name=filename, mime="text/csv", key=key)


def create_excel_download_button(file_bytes, filename, label="📥 Download Excel report", key=None):
    if not file_bytes:
        return

    st.download_button(label=label, data=file_bytes, file_name=filename, mime=XLSX_MIME, key=key)
