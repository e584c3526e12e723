"""Command-line surface over the sampler services."""
