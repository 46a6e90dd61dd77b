"""Stage-wise second-order structured pruning for diffusion denoisers."""
