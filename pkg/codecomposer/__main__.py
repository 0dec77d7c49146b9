"""CLI entry point for codecomposer."""

import sys

from codecomposer.cli import main

if __name__ == "__main__":
  sys.exit(main())
