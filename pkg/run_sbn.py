#!/usr/bin/env python3
"""
Entry point for the Stokes-Biot simulator.

    python run_sbn.py run configs/test1.ini
    python run_sbn.py mesh --nx 5 --ny 5 --out channel.mesh
"""
import sys

from cli import main

if __name__ == "__main__":
    sys.exit(main())
