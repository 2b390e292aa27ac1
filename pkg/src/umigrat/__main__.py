import sys

from umigrat.cli import main

sys.exit(main())
