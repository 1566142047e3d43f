"""Evolution-searched binary networks with heterogeneous group convolutions."""

__version__ = "0.1.0"
