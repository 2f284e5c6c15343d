"""``python -m ncadmm``."""

import sys

from .cli import main

sys.exit(main())
