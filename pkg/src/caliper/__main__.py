import sys

from .cli import cas_main

sys.exit(cas_main())
