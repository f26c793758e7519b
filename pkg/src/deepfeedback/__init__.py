"""Learned feedback solver for inverse problems."""
