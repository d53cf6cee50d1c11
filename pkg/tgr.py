#!/usr/bin/env python3
"""
Run the TGR-MoE lab from a checkout: python tgr.py <command> [options]
"""

import sys

from tgr_moe.cli import main

if __name__ == "__main__":
    sys.exit(main())
