"""Multi-view trajectory representation learning."""
