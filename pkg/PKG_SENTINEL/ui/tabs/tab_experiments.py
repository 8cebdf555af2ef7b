"""
Experiments Tab
===============
Cross-validation reports saved by ``cli.py evaluate --output <file>.json``.
"""

import os

import streamlit as st

from data.loaders import SettingsFileError, read_experiment_document
from service.report_service import experiment_table_from_document
from ui.components import create_download_button, show_dataframe, show_info_message, show_warning_message


@st.cache_data(show_spinner=False, ttl=300)
def load_experiment_table_cached(path: str):
    return experiment_table_from_document(read_experiment_document(path))


def render_tab_experiments():
    st.header("🧪 Experiments")

    files = st.session_state.get("experiment_files") or []
    if not files:
        show_info_message("No experiment reports. Save one with `python cli.py evaluate --output <dir>/<name>.json`.")
        return

    names = [os.path.basename(path) for path in files]
    choice = st.selectbox("Report", names, key="experiment_file")
    path = files[names.index(choice)]
    try:
        table = load_experiment_table_cached(path)
    except SettingsFileError as exc:
        show_warning_message(str(exc))
        return

    st.caption("Mean ± std in percent over all folds and repeats.")
    show_dataframe(table)
    create_download_button(table, choice.replace(".json", ".csv"), key="experiment_csv")
