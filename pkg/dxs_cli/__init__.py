"""
Command-line interface for the dxs toolkit.
"""

from dxs_cli.main import app

__all__ = ["app"]
