import sys

from harpia.cli import main

sys.exit(main())
