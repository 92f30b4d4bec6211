import sys

from privgps.cli import main

sys.exit(main())
