import sys

from codeckit.cli import main

sys.exit(main())
