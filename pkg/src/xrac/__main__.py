import sys

from xrac.cli import main

sys.exit(main())
