"""Numerics, encoders, training and evaluation for MUSER."""
