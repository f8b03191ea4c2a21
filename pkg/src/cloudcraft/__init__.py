"""Cloud crafting platform: route product orders to nearby 3D printers and settle them."""

__version__ = "0.1.0"
