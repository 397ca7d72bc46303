"""Weight-sharing NAS compression toolkit for small decoder-only transformers."""
