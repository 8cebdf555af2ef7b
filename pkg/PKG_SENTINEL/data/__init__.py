"""
Data layer: archives, registry feeds, loaders, processors and validators
"""
