import sys

from eq4d.cli import main

sys.exit(main())
