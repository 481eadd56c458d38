"""External model adapter: a low-rank-adapted transformer behind the
line-delimited JSON wire protocol."""

__version__ = "0.1.0"
