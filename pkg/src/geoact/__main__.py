import sys

from geoact.cli import main

sys.exit(main())
