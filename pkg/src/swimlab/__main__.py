import sys

from swimlab.cli import main

sys.exit(main())
