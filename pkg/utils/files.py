# Copyright 2024 Tarkan Al-Kazily

import hashlib
import os
import pathlib


def file_digest(path: str | os.PathLike) -> str:
    """
    Args:
        path: File to hash

    Returns:
    - sha256 hex digest of the file contents
    """
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_output(path: str | os.PathLike, data: bytes | str):
    """
    Write a result file, creating missing parent directories.

    Args:
        path: Destination
        data: bytes are written as-is, str as UTF-8
    """
    path = pathlib.Path(path)
    if path.parent != pathlib.Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    with open(path, "wb") as f:
        f.write(data)
