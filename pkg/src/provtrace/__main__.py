import sys

from provtrace.cli import main

sys.exit(main())
