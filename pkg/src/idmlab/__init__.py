"""Inverse-dynamics-model vs behavior-cloning experiments on gridworlds, on a small numpy autodiff."""

__version__ = "0.1.0"
