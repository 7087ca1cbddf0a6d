"""Neural tangent kernel and path-integrated kernel analyses for small networks."""

__version__ = "0.1.0"
