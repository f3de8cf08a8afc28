"""Seeding, hashing and fingerprint helpers shared across the package."""

import hashlib
import json
import os
import random
from pathlib import Path

import numpy as np
import torch

DATA_ROOT_ENV = "CCL_DATA_ROOT"


def sub_seed(seed: int, name: str) -> int:
    """Derive a named 31-bit sub-seed from a master seed."""
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def stable_hash(obj) -> str:
    """sha256 of the canonical JSON encoding of ``obj``."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def tensor_dict_hash(state: dict) -> str:
    h = hashlib.sha256()
    for key in sorted(state):
        t = state[key].detach().cpu().contiguous()
        h.update(key.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def dataset_fingerprint(root) -> str:
    """Content hash over the relative file list and file sizes under ``root``."""
    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix()
        if rel == "manifest.json":
            continue
        h.update(f"{rel}\t{path.stat().st_size}\n".encode())
    return h.hexdigest()


def default_data_root():
    return os.environ.get(DATA_ROOT_ENV)
