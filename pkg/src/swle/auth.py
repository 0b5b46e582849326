"""Message authentication.

The engine only needs ``sign``/``verify``; any scheme with that shape (for
instance ed25519 keys per replica) can be dropped in.  The default is a
keyed-hash scheme whose keys never leave the simulation, which makes it
unforgeable by construction for simulated adversaries.
"""

from __future__ import annotations

import hashlib
from typing import Protocol


class Authenticator(Protocol):
    def sign(self, signer: int, data: bytes) -> bytes: ...

    def verify(self, signer: int, data: bytes, signature: bytes) -> bool: ...


class SimAuthenticator:
    def __init__(self, n: int, seed: int = 0):
        self._keys = [
            hashlib.blake2b(f"swle-key/{seed}/{i}".encode(), digest_size=32).digest() for i in range(n)
        ]

    def sign(self, signer: int, data: bytes) -> bytes:
        return hashlib.blake2b(data, key=self._keys[signer], digest_size=16).digest()

    def verify(self, signer: int, data: bytes, signature: bytes) -> bool:
        if not 0 <= signer < len(self._keys):
            return False
        return hashlib.blake2b(data, key=self._keys[signer], digest_size=16).digest() == signature
