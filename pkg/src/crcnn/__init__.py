"""Constrained R-CNN style manipulation detection."""
