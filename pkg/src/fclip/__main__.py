import sys

from fclip.harness import main

sys.exit(main())
