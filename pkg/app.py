"""
Entrypoint for the simulator CLI, see pflalign_sim/cli.py
"""

import sys

from pflalign_sim.cli import main

if __name__ == "__main__":
    sys.exit(main())
