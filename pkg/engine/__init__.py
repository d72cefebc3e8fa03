# density-match - Engine Package
# The model, the density estimates, the divergences, and the training loop
