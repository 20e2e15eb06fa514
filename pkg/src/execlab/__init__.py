"""Two-player discrete Almgren-Chriss liquidation game laboratory."""

__version__ = "0.1.0"
