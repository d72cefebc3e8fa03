# density-match - Warehouse Package
# Checkpoint files, result tables, and the run directory layout
