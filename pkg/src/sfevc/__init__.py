"""Source-filter emotional voice conversion on a numpy autodiff substrate."""

__version__ = "0.1.0"
