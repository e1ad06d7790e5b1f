import sys

from dualview.cli import main

sys.exit(main())
