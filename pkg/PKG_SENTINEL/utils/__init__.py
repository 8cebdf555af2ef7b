"""
Shared helpers: files, dates and Excel export
"""
