"""Full pipeline with the default configuration; prints the acceptance lines.

    python3 scripts/reproduce.py [--out runs/default] [--seed 0]
"""

import sys

from plmnet.cli import main

if __name__ == "__main__":
    sys.exit(main(["reproduce", *sys.argv[1:]]))
