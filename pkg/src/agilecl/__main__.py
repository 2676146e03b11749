import sys

from agilecl.cli import main

sys.exit(main())
