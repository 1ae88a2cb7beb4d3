"""MPC-guided imitation learning of mixture-of-experts policies for hybrid systems."""

__version__ = "0.1.0"
