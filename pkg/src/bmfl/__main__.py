import sys

from bmfl.harness.cli import main

sys.exit(main())
