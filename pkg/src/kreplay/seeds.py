"""Named seed substreams so each phase draws randomness independently."""

from __future__ import annotations

import hashlib


def derive_seed(seed: int, *names: object) -> int:
    """Stable 63-bit seed from a root seed and a path of names."""
    key = "/".join([str(int(seed)), *map(str, names)]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1
