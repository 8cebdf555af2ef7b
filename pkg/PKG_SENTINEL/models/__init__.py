"""
Tree learners and the portable model format
"""
