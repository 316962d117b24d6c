"""Scripted adversaries and the matrix that measures how each is caught."""
