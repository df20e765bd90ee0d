"""Multi-bounce MIMO-FDM channel simulation and dictionary-aided SAGE estimation."""

__version__ = "0.1.0"
