import sys

from imexnse.harness import main

sys.exit(main())
