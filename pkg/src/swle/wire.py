"""Canonical byte encodings used for digests and signatures.

Every encoding starts with a one-byte tag.  Integers are little-endian
(``u32`` for replica ids and counts, ``u64`` for views and batch ids),
lists carry a ``u32`` length prefix and byte strings a ``u32`` length prefix.

====================  =====================================================
tag                   fields after the tag
====================  =====================================================
``0x01`` block        view u64, parent bytes, proposer u32, batch_id u64,
                      n_ops u32, op_bytes u32
``0x02`` vote         phase u8, view u64, block digest bytes
``0x03`` extension    view u64, leader u32, target u64, candidates list<u32>,
                      voter u32
``0x04`` proposal     view u64, block digest bytes, proposer u32
``0x05`` view-change  view u64, high-qc view u64, high-qc digest bytes,
                      sender u32
====================  =====================================================

A block carrying a leader certificate appends ``encode_certificate`` (untagged)
before hashing.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Sequence

BLOCK, VOTE, EXTENSION, PROPOSAL, VIEW_CHANGE = 1, 2, 3, 4, 5

_u32 = struct.Struct("<I").pack
_u64 = struct.Struct("<Q").pack


def _bytes(b: bytes) -> bytes:
    return _u32(len(b)) + b


def encode_block(view: int, parent: bytes, proposer: int, batch_id: int, n_ops: int, op_bytes: int) -> bytes:
    return (bytes((BLOCK,)) + _u64(view) + _bytes(parent) + _u32(proposer)
            + _u64(batch_id) + _u32(n_ops) + _u32(op_bytes))


_vote_head = struct.Struct("<BBQI").pack


def encode_vote(phase: int, view: int, digest: bytes) -> bytes:
    return _vote_head(VOTE, phase, view, len(digest)) + digest


def encode_extension(view: int, leader: int, target: int, candidates: Sequence[int], voter: int) -> bytes:
    cands = struct.pack(f"<I{len(candidates)}I", len(candidates), *candidates)
    return bytes((EXTENSION,)) + _u64(view) + _u32(leader) + _u64(target) + cands + _u32(voter)


def encode_proposal(view: int, digest: bytes, proposer: int) -> bytes:
    return bytes((PROPOSAL,)) + _u64(view) + _bytes(digest) + _u32(proposer)


def encode_view_change(view: int, qc_view: int, qc_digest: bytes, sender: int) -> bytes:
    return bytes((VIEW_CHANGE,)) + _u64(view) + _u64(qc_view) + _bytes(qc_digest) + _u32(sender)


def digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=32).digest()


def encode_certificate(target: int, elected, signatures: Sequence[bytes]) -> bytes:
    """Certificate summary folded into a block digest (``0xFFFFFFFF`` for no winner)."""
    sigs = b"".join(_bytes(s) for s in signatures)
    return _u64(target) + _u32(0xFFFFFFFF if elected is None else elected) + _u32(len(signatures)) + sigs
