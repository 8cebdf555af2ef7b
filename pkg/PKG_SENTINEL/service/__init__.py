"""
Business logic: lexing, features, datasets, training, tuning, scanning, reports
"""
