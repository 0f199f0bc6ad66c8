"""Multi-stream RGB-D sign recognition with proxy-video sampling and late fusion."""

__version__ = "0.1.0"
