"""Command-line surface of the material field toolkit."""
