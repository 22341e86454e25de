"""Entry point for python -m panoattn."""
from panoattn.cli import main_sync

main_sync()
