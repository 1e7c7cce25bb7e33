import sys

from lir.cli import main

sys.exit(main())
