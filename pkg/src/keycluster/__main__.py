import sys

from keycluster.cli import main

sys.exit(main())
