"""opwalk - backbone walk laboratory for supercritical oriented percolation."""
