import sys

from latres.cli import main

sys.exit(main())
