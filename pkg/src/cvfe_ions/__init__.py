"""Control-volume finite-element solver for cross-diffusion ion transport."""
