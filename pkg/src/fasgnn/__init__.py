"""Two-stage graph neural network for fluid-antenna placement and beamforming."""
__version__ = "0.1.0"
