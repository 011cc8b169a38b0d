"""Workflow module of vjdd.

Training, evaluation and ablation drivers, plus jobflow makers wrapping them.
"""
