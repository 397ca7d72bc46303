"""Byte-level corpus handling: tokens are raw bytes, V = 256."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import InputError


def encode(text):
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def load_corpus(path):
    data = Path(path).read_bytes()
    if not data:
        raise InputError(f"corpus {path} is empty")
    return encode(data)


def split(tokens, val_fraction=0.1):
    """Contiguous train/validation split (validation is the tail)."""
    n_val = int(len(tokens) * val_fraction)
    return tokens[: len(tokens) - n_val], tokens[len(tokens) - n_val:]


def make_windows(tokens, seq_len):
    """Rows of ``seq_len + 1`` tokens; consecutive rows share one boundary token
    so every target position is predicted exactly once."""
    tokens = np.asarray(tokens, dtype=np.int64)
    n = (len(tokens) - 1) // seq_len
    if n < 1:
        raise InputError(f"corpus of {len(tokens)} tokens is shorter than one window of {seq_len + 1}")
    idx = np.arange(n)[:, None] * seq_len + np.arange(seq_len + 1)[None, :]
    return tokens[idx]


def calibration_windows(windows, n, seed=0):
    rng = np.random.default_rng(seed)
    n = min(n, len(windows))
    return windows[np.sort(rng.choice(len(windows), size=n, replace=False))]


def batches(windows, batch_size):
    for i in range(0, len(windows), batch_size):
        yield windows[i:i + batch_size]
