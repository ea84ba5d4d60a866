#!/usr/bin/env python3
"""Dense Tracker - Main Entry Point.

Dense point tracking for short videos: every pixel of a query frame is
tracked through all frames, with per-frame visibility and confidence.

Usage:
    python main.py track --frames <dir> --out <dir>
    python main.py --help
"""

import sys
import os

# Add src directory to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))


def main(argv=None):
    """Main entry point for the Dense Tracker."""
    from src.cli import main as cli_main
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
