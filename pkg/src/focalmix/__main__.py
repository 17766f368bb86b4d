"""Run the command-line interface via ``python -m focalmix``."""

from .cli import main

if __name__ == "__main__":
    main()
