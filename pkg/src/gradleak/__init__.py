"""Gradient leakage attacks and defenses in simulated federated learning."""
