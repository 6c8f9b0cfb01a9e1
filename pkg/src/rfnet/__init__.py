"""Receptive-field local feature pipeline."""
