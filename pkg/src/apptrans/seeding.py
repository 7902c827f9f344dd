"""Stable seed derivation, independent of PYTHONHASHSEED and process state."""

from __future__ import annotations

import hashlib
import struct


def derive_seed(*parts: int | float | str) -> int:
    """Hash a mixed tuple of ints/floats/strings into a 63-bit seed.

    Floats are packed by their IEEE-754 bits, so two runs of the same program
    always derive the same seed from the same inputs.
    """
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, bool):
            h.update(b"b" + struct.pack("<?", part))
        elif isinstance(part, int):
            h.update(b"i" + struct.pack("<q", part))
        elif isinstance(part, float):
            h.update(b"f" + struct.pack("<d", part))
        elif isinstance(part, str):
            encoded = part.encode("utf-8")
            h.update(b"s" + struct.pack("<i", len(encoded)) + encoded)
        else:
            raise TypeError(f"unsupported seed part type: {type(part)!r}")
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFFFFFFFFFFFFFF
