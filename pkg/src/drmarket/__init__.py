"""Market-game simulation for risk-aware reserve bidding by renewable microgrids."""

__version__ = "0.1.0"
