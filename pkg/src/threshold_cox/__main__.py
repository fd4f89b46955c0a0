import sys

from threshold_cox.cli import main

sys.exit(main())
