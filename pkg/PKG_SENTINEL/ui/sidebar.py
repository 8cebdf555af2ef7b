"""
Sidebar panel
===========================
Data sources, quick counts and a reload button.
"""

import pandas as pd
import streamlit as st


def render_state_data(scan_dir: str, experiment_dir: str):
    with st.sidebar:
        st.header("📊 Data")
        _show_data_status(scan_dir, experiment_dir)

        st.divider()
        _show_quick_summary()

        st.divider()
        if st.button("🔄 Reload", help="Read the sink and experiment files again"):
            _reload_data()

        st.divider()
        _show_last_update()


def _show_data_status(scan_dir: str, experiment_dir: str):
    sinks = st.session_state.get("sink_files") or []
    verdicts = st.session_state.get("verdicts_df")
    if sinks:
        st.success(f"✅ {len(sinks)} sink files, {len(verdicts)} verdicts")
    else:
        st.warning(f"⚠️ No sink files in {scan_dir}")

    experiments = st.session_state.get("experiment_files") or []
    if experiments:
        st.success(f"✅ {len(experiments)} experiment reports")
    else:
        st.caption(f"No experiment reports in {experiment_dir}")


def _show_quick_summary():
    st.subheader("📈 Summary")
    verdicts = st.session_state.get("verdicts_df")
    if verdicts is None or verdicts.empty:
        st.metric("Flagged packages", 0)
        return
    st.metric("Flagged packages", int((verdicts["label"] == "malicious").sum()))
    st.metric("Ingest / download errors", int((verdicts["disposition"] != "classified").sum()))


def _show_last_update():
    st.subheader("🕐 Last reload")
    last = st.session_state.get("last_update")
    st.caption(f"📅 {last}" if last else "Not reloaded yet")


def _reload_data():
    st.cache_data.clear()
    st.session_state.pop("initialized", None)
    st.session_state["last_update"] = pd.Timestamp.now(tz="UTC").strftime("%Y-%m-%d %H:%M UTC")
    st.rerun()
