import sys

from flipequiv.cli import main

sys.exit(main())
