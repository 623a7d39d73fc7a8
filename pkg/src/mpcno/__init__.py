"""Multiscale point-cloud neural operators for boundary integral kernels."""
