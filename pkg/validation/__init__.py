# density-match - Validation Package
# Dice evaluation, experiment matrix, ablations, multisite protocol, gradient-check suite
