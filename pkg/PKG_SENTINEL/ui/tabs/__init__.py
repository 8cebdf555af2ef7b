"""
Dashboard tabs.
"""
