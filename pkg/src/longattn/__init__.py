"""Long-context attention toolkit: chunked position remapping, vertical-slash
sparse prefill, sparsity refinement, engine scheduling simulators and
synthetic long-dependency data."""

__version__ = "0.1.0"
