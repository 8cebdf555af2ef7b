"""
Package Sentinel - Triage Dashboard
==================================================
Streamlit Application Entry Point

    streamlit run PKG_SENTINEL/app.py

Read-only view over the scan sinks and saved experiment reports.
"""

import streamlit as st

from config.settings import FILES, PAGE_CONFIG, configure_logging
from data.loaders import list_experiment_files, list_sink_files, read_sink_records
from data.processors import verdict_frame
from ui.components import show_metric_card
from ui.sidebar import render_state_data
from ui.tabs.tab_experiments import render_tab_experiments
from ui.tabs.tab_scan_results import render_tab_scan_results


@st.cache_data(show_spinner=False, ttl=300)
def load_sink_records_cached(paths: tuple[str, ...]) -> list:
    return read_sink_records(list(paths))


def init_session_state():
    if "initialized" in st.session_state:
        return

    sink_files = list_sink_files(FILES["scans"])
    records = load_sink_records_cached(tuple(sink_files))
    st.session_state["sink_files"] = sink_files
    st.session_state["sink_records"] = records
    st.session_state["verdicts_df"] = verdict_frame(records)
    st.session_state["experiment_files"] = list_experiment_files(FILES["experiments"])
    st.session_state["initialized"] = True


def render_home():
    st.header("🏠 Overview")

    verdicts = st.session_state.get("verdicts_df")
    col1, col2, col3 = st.columns(3)
    for column, ecosystem in ((col1, "npm"), (col2, "pypi")):
        with column:
            subset = verdicts[verdicts["ecosystem"] == ecosystem] if verdicts is not None else None
            scanned = len(subset) if subset is not None else 0
            flagged = int((subset["label"] == "malicious").sum()) if scanned else 0
            show_metric_card(f"{ecosystem} scanned", scanned)
            show_metric_card(f"{ecosystem} flagged", flagged)
    with col3:
        show_metric_card("Experiment reports", len(st.session_state.get("experiment_files") or []))

    st.markdown("---")
    st.subheader("📖 How to use")
    st.markdown("""
    1. **Scan**: `python cli.py scan` (or `watch`) appends verdicts to the sink directory.
    2. **Triage**: the *Scan results* tab lists flagged packages with the features behind each verdict.
    3. **Compare models**: per-model flagged counts show mono-language vs cross-language models side by side.
    4. **Export**: download the filtered tables as CSV or the full report as Excel.
    """)


def main():
    configure_logging()
    st.set_page_config(**PAGE_CONFIG)
    init_session_state()

    st.title("🛡️ Package Sentinel")
    render_state_data(FILES["scans"], FILES["experiments"])

    tab_home, tab_scans, tab_experiments = st.tabs(["🏠 Overview", "🛡️ Scan results", "🧪 Experiments"])
    with tab_home:
        render_home()
    with tab_scans:
        render_tab_scan_results()
    with tab_experiments:
        render_tab_experiments()


if __name__ == "__main__":
    main()
