import sys

from aircomp_fl.cli import main

if __name__ == "__main__":
    sys.exit(main())
