import sys

from quicwall.cli import main

sys.exit(main())
