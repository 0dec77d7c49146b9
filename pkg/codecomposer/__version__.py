"""Codecomposer version information - synced from pyproject.toml"""

import importlib.metadata

try:
  __version__ = importlib.metadata.version("codecomposer")
except importlib.metadata.PackageNotFoundError:
  # Fallback for development/uninstalled package
  __version__ = "0.1.0-dev"
