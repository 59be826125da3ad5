"""
Generator evaluation.
"""
