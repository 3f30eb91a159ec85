#!/usr/bin/env python3

import sys
from .cli_typer import main

if __name__ == "__main__":
    sys.exit(main())
