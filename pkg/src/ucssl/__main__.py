import sys

from ucssl.cli import main

sys.exit(main())
