import sys

from selective_fusion.cli import main

sys.exit(main())
