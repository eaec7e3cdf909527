"""Top level package for MUSER.

MUSER learns a shared embedding space for music audio, its spectrum and
text built from metadata templates. The ``core`` package holds the numerics,
encoders, contrastive objective, training loop, evaluation and data formats;
``cli`` ties them together on the command line.
"""

__all__ = [
    "core",
    "cli",
]

__version__ = "0.1.0"
