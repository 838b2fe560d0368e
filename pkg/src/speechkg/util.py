"""Shared helpers: seed fan-out, file hashing, atomic writes, logging."""

from __future__ import annotations

import hashlib
import logging
import os
import tempfile

# Every stochastic stage draws from the run seed plus a fixed offset, so one
# seed flag reproduces the whole pipeline while stages stay decoupled.
SEED_OFFSETS = {
    "split": 1,
    "features": 2,
    "init": 3,
    "dropout": 4,
    "negatives": 5,
    "dev_negatives": 6,
    "test_negatives": 7,
    "eval_shuffle": 8,
    "grid": 9,
}

_SEED_MOD = 2**32


def derive_seed(base: int, purpose: str) -> int:
    if purpose not in SEED_OFFSETS:
        raise KeyError(f"unknown seed purpose: {purpose!r}")
    return (int(base) + SEED_OFFSETS[purpose]) % _SEED_MOD


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write to a temp file in the target directory, then rename over the target."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp.", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def setup_logging() -> None:
    """Configure root logging from the SPEECHKG_LOG environment variable."""
    name = os.environ.get("SPEECHKG_LOG", "WARNING").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
