"""``python -m opwalk <experiment>``."""

from opwalk.opwalk import main

main(prog_name="opwalk")
