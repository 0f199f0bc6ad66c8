import sys

from proxysign.cli import main

sys.exit(main())
