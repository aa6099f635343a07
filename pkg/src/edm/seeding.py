"""Stable seed derivation.

Sub-seeds are the first 8 bytes of SHA-256 over the textual parts, so they
do not depend on Python's per-process hash randomization.
"""

import hashlib


def derive_seed(*parts) -> int:
    text = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big") >> 1
