import sys

from fedmf.cli import main

sys.exit(main())
