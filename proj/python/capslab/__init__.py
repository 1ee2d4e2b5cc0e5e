"""Capsule network training and capsule-space analysis."""

try:
    from ._capslab import *  # noqa: F401,F403  (wheel layout)
    from ._capslab import __version__  # noqa: F401
except ImportError:  # development layout: extension on PYTHONPATH
    from _capslab import *  # noqa: F401,F403
    from _capslab import __version__  # noqa: F401
