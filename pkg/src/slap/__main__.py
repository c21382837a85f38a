from slap.cli import main
import sys

sys.exit(main())
