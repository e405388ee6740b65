# main.py
import sys

from app import main  # app.py must contain: def main(argv=None) -> int

if __name__ == "__main__":
    sys.exit(main())
