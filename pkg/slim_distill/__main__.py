import sys

from slim_distill.cli import main

if __name__ == "__main__":
    sys.exit(main())
