"""tilepic: a desk-scale electromagnetic particle-in-cell engine built around
tile-batched outer-product kernels, a sort-on-write particle layout, and
redistribution overlapped with deposition on a simulated rank fabric."""

__version__ = "0.1.0"
