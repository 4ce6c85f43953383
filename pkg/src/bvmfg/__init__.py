"""Mean field games with bounded-velocity singular controls."""
__version__ = "0.1.0"
