"""Allow ``python -m facml``."""

import sys

from .cli import main

sys.exit(main())
