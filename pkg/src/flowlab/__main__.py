"""``python3 -m flowlab`` entry point."""

import sys

from .cli import main

sys.exit(main())
