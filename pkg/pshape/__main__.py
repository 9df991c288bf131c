import sys

from pshape import pshape

if __name__ == "__main__":
    sys.exit(pshape.main())
