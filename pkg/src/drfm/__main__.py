import sys

from drfm.cli import main

sys.exit(main())
