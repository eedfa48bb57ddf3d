"""
Self-normalized AIPW inference for adaptive experiments
=======================================================

Command-line entry point. Subcommands:

    simulate   Monte Carlo coverage tables for designs A, B, C1, C2 and D
    infer      estimate and interval from a logged experiment
    audit      logging-contract checks on a log and its fit ledger
    reproduce  bundled published grids, one command each
    dump       one simulated trial for use with infer and audit

Run ``python main.py <subcommand> --help`` for the flags of each.
"""

import sys

from app.cli import main


if __name__ == "__main__":
    sys.exit(main())
