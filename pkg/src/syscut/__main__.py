import sys

from syscut.cli import main

sys.exit(main())
