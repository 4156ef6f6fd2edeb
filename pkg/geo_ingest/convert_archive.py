#!/usr/bin/env python3
"""Thin launcher: `convert_archive.py --layout cloud38|ocn --src DIR --out DIR`."""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "src"))

from geo_ingest.convert import main

if __name__ == "__main__":
    sys.exit(main())
