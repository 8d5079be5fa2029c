"""`python -m rapidsim`."""
import sys

from rapidsim.main import main

sys.exit(main())
