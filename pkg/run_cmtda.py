import sys

from cmt_da.cli import main


if __name__ == "__main__":
    sys.exit(main())
