"""
Settings and bundled resources.
"""
