"""Enable running with `python -m`."""

from fsagp.cli import main

if __name__ == "__main__":
    main()
