"""Tagged-particle diffusion in interacting Brownian particle systems."""
