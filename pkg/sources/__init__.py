# density-match - Data Sources Package
# Synthetic domain-shifted scenes, user-supplied PGM manifests, and train/val/target splits
