import sys

from magnoncav.cli import main

sys.exit(main())
