"""Allow `python -m barkid` as an alias for the `barkid` entry point."""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
