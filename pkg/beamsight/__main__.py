import sys

from beamsight.cli import main

sys.exit(main())
