import sys

from btpp.cli import main

sys.exit(main())
