"""Dynamic-resolution region extraction, multi-stream patch encoding and
image-text alignment objectives, on a small numpy autodiff core."""

__version__ = "0.1.0"
