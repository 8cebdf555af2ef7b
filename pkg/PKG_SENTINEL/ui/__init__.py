"""
Streamlit user interface for the triage dashboard.
"""
