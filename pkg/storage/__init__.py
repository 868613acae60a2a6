"""Storage layer package."""
