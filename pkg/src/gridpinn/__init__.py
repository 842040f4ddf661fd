"""Physics-informed neural state estimation workbench for transmission grids."""

__version__ = "0.1.0"
