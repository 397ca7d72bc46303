"""Entry point for ``python -m nasprune``."""

from .cli import main

main()
