import sys

from plandoctor.cli import main

sys.exit(main())
