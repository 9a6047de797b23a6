"""Module entry point: python -m attnmask."""

import sys

from .cli import main

sys.exit(main())
