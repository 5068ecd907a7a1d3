import sys

from dicerec.cli import main

sys.exit(main())
