import sys

from longattn.cli import main

sys.exit(main())
