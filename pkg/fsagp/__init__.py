"""Full-scale approximation Gaussian processes with preconditioned iterative methods."""
