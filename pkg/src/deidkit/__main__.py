import sys

from deidkit.cli import main

sys.exit(main())
