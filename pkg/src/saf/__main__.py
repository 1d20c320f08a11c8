import sys

from saf.cli import main

sys.exit(main())
