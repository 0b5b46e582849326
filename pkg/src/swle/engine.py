"""Non-chained three-phase HotStuff-style replica with a pluggable leader election.

A :class:`Replica` is a deterministic state machine.  The harness sets
``replica.now`` (integer microseconds), calls one of the ``on_*`` entry
points, then drains ``replica.outbox`` (``(dst, msg)`` pairs, ``dst = None``
for broadcast) and ``replica.timers`` (``(view, deadline)`` pairs).

Round structure for view ``v``::

    leader --Proposal--> all --PREPARE vote--> leader --Certify(prepareQC)--> all
    all --PRECOMMIT vote--> leader --Certify(precommitQC)--> all
    all --COMMIT vote + election extension--> leader and next leader
    leader --Decide(commitQC)--> all

The next leader can assemble the commit QC itself from the COMMIT votes it
receives, so it does not have to wait for the decide broadcast.  A view that
times out ends with every replica broadcasting a :class:`ViewChange`; ``2f+1``
of them let the next leader propose and serve as a timeout certificate for
replicas that lag behind.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Protocol

from swle import core, wire
from swle.auth import Authenticator
from swle.core import LeaderCertificate, Params, ScoreEvent, VoteExtension


class Phase(enum.IntEnum):
    PREPARE = 1
    PRECOMMIT = 2
    COMMIT = 3


class SafetyViolation(Exception):
    """Two different blocks finalized for the same view."""


@dataclass(frozen=True, eq=False)
class Block:
    view: int
    parent: Optional["Block"]
    proposer: int
    batch_id: int
    n_ops: int
    op_bytes: int = 0
    leader_cert: Optional[LeaderCertificate] = None

    @cached_property
    def digest(self) -> bytes:
        parent = self.parent.digest if self.parent is not None else b""
        data = wire.encode_block(self.view, parent, self.proposer, self.batch_id, self.n_ops, self.op_bytes)
        c = self.leader_cert
        if c is not None:
            data += wire.encode_certificate(c.target_view, c.elected, [e.signature for e in c.votes])
        return wire.digest(data)

    def extends(self, other: "Block") -> bool:
        b: Optional[Block] = self
        while b is not None and b.view >= other.view:
            if b is other or b.digest == other.digest:
                return True
            b = b.parent
        return False


GENESIS = Block(0, None, 0, 0, 0)


@dataclass(frozen=True, eq=False)
class QuorumCertificate:
    view: int
    phase: Phase
    block: Block
    signers: tuple[tuple[int, bytes], ...]

    @property
    def digest(self) -> bytes:
        return self.block.digest

    def rank(self) -> tuple[int, int]:
        return (self.view, int(self.phase))


GENESIS_QC = QuorumCertificate(0, Phase.COMMIT, GENESIS, ())


@dataclass(frozen=True, eq=False)
class Vote:
    view: int
    phase: Phase
    block: Block
    voter: int
    extension: Optional[VoteExtension]
    signature: bytes


@dataclass(frozen=True, eq=False)
class Proposal:
    view: int
    block: Block
    justify: QuorumCertificate
    leader_cert: Optional[LeaderCertificate]
    timeout_cert: Optional[tuple["ViewChange", ...]]
    proposer: int
    signature: bytes


@dataclass(frozen=True, eq=False)
class Certify:
    """Leader broadcast of a PREPARE or PRECOMMIT quorum certificate."""

    qc: QuorumCertificate
    sender: int


@dataclass(frozen=True, eq=False)
class Decide:
    qc: QuorumCertificate
    sender: int


@dataclass(frozen=True, eq=False)
class ViewChange:
    view: int  # the view that timed out
    high_qc: QuorumCertificate
    extension: Optional[VoteExtension]
    sender: int
    signature: bytes


class Observer(Protocol):
    """Hooks the harness uses to collect records and check invariants."""

    def entered(self, replica: int, view: int, leader: int, elected_known: bool, now: int) -> None: ...

    def redetermined(self, replica: int, view: int, leader: int) -> None: ...

    def claim_accepted(self, replica: int, view: int, proposer: int, cert: Optional[LeaderCertificate]) -> None: ...

    def timed_out(self, replica: int, view: int, now: int) -> None: ...

    def finalized(self, replica: int, block: Block, now: int) -> None: ...

    def quorum_formed(self, replica: int, qc: QuorumCertificate) -> None: ...

    def take_batch(self, proposer: int, view: int) -> tuple[int, int]: ...


class NullObserver:
    def entered(self, *a): pass
    def redetermined(self, *a): pass
    def claim_accepted(self, *a): pass
    def timed_out(self, *a): pass
    def finalized(self, *a): pass
    def quorum_formed(self, *a): pass

    def take_batch(self, proposer, view):
        return view, 0


# --------------------------------------------------------------------------
# election providers


class RoundRobinElection:
    """Leader of ``v`` is ``v mod n``; no extensions, no certificates."""

    uses_certificates = False

    def __init__(self, params: Params, owner: int, auth: Authenticator):
        self.params = params
        self.owner = owner

    def determine(self, v: int, claim: Optional[int] = None) -> int:
        return v % self.params.n

    def elected_known(self, v: int) -> bool:
        return True

    def on_enter(self, v: int) -> int:
        return v % self.params.n

    def on_timeout(self, v: int, leader: int) -> None:
        pass

    def on_finalized(self, block: Block, cert: Optional[LeaderCertificate], current_view: int) -> None:
        pass

    def on_led(self, promoters) -> None:
        pass

    def complete(self, v: int) -> None:
        pass

    def extension(self, v: int) -> Optional[VoteExtension]:
        return None

    def check_cert(self, cert, proposer: int, view: int) -> None:
        if cert is not None:
            raise core.InvalidCertificate(core.Reject.MALFORMED_VOTE_SET, "round-robin proposals carry no certificate")


class SwleElection:
    """Per-replica reputation matrix and leader list driven by engine events."""

    uses_certificates = True

    def __init__(self, params: Params, owner: int, auth: Authenticator):
        self.params = params
        self.owner = owner
        self.auth = auth
        self.matrix = core.ReputationMatrix(params, owner)
        self.leaders = core.LeaderList(params)

    def determine(self, v: int, claim: Optional[int] = None) -> int:
        return core.determine_leader(self.leaders, v, claim)

    def elected_known(self, v: int) -> bool:
        return self.leaders.elected_leader(v) is not None

    def on_enter(self, v: int) -> int:
        p = self.params
        if v % p.theta == 0:
            core.apply_score_event(self.matrix, ScoreEvent.refresh(), p)
        leader = self.determine(v)
        core.apply_score_event(self.matrix, ScoreEvent.enter_view(leader), p)
        return leader

    def on_timeout(self, v: int, leader: int) -> None:
        core.apply_score_event(self.matrix, ScoreEvent.timeout(leader), self.params)

    def on_finalized(self, block: Block, cert: Optional[LeaderCertificate], current_view: int) -> None:
        core.apply_score_event(self.matrix, ScoreEvent.finalized(block.proposer), self.params)
        # slots of views already entered are frozen
        if cert is not None and cert.target_view > current_view:
            core.apply_certificate(self.leaders, cert)

    def on_led(self, promoters) -> None:
        core.apply_score_event(self.matrix, ScoreEvent.promoters(promoters), self.params)

    def complete(self, v: int) -> None:
        core.advance_window(self.leaders, v)

    def extension(self, v: int) -> VoteExtension:
        p = self.params
        target = core.target_view(v, p)
        cands = core.generate_candidates(self.matrix, self.leaders, target, p)
        return core.make_extension(v, self.determine(v + 1), target, cands, self.owner, self.auth)

    def check_cert(self, cert: Optional[LeaderCertificate], proposer: int, view: int) -> None:
        if cert is None:
            if view == 1:
                return
            raise core.InvalidCertificate(core.Reject.MALFORMED_VOTE_SET, "missing leader certificate")
        core.verify_certificate(cert, proposer, view, self.params, self.auth)


ELECTIONS = {"swle": SwleElection, "roundrobin": RoundRobinElection}


# --------------------------------------------------------------------------


@dataclass
class ViewState:
    view: int = 0
    phase: Optional[Phase] = None
    locked_qc: QuorumCertificate = GENESIS_QC
    high_qc: QuorumCertificate = GENESIS_QC
    deadline: Optional[int] = None
    leader: Optional[int] = None
    accepted: Optional[Proposal] = None
    votes: dict = field(default_factory=dict)  # (view, phase) -> {voter: Vote}
    view_changes: dict = field(default_factory=dict)  # view -> {sender: ViewChange}


class Replica:
    def __init__(self, rid: int, params: Params, auth: Authenticator, mechanism: str = "swle",
                 timeout_us: int = 1_500_000, observer=None, block_store: Optional[dict] = None,
                 verdicts: Optional[dict] = None):
        self.id = rid
        self.params = params
        self.auth = auth
        self.election = ELECTIONS[mechanism](params, rid, auth)
        self.timeout_us = timeout_us
        self.obs = observer if observer is not None else NullObserver()
        self.blocks = block_store if block_store is not None else {}
        self.blocks.setdefault(GENESIS.digest, GENESIS)
        # replicas sharing one process may share verification results; keys are
        # the (immutable) message objects themselves
        self.verdicts = verdicts if verdicts is not None else {}
        self.state = ViewState()
        self.now = 0
        self.outbox: list = []
        self.timers: list = []
        self.finalized: dict[int, bytes] = {}  # view -> digest
        self.last_final = GENESIS
        self.proposed: set[int] = set()
        self.my_blocks: dict[int, bytes] = {}
        self.op_bytes = 0
        self.voted: set[tuple[int, int]] = set()
        self.prepare_order: dict[int, list[int]] = {}
        self.certified: set[tuple[int, int]] = set()
        self.tallies: dict[tuple, list[Vote]] = {}
        self.pending: dict[int, list[Proposal]] = {}
        self.timed_out_views: set[int] = set()

    # ---------------------------------------------------------------- helpers

    @property
    def view(self) -> int:
        return self.state.view

    def _send(self, dst: Optional[int], msg) -> None:
        self.outbox.append((dst, msg))

    def _qc_valid(self, qc: QuorumCertificate) -> bool:
        ok = self.verdicts.get(qc)
        if ok is None:
            ok = self._check_qc(qc)
            self._remember(qc, ok)
        return ok

    def _remember(self, key, ok) -> None:
        if len(self.verdicts) > 50_000:
            self.verdicts.clear()
        self.verdicts[key] = ok

    def _check_qc(self, qc: QuorumCertificate) -> bool:
        if qc.view == 0:
            return qc is GENESIS_QC or qc.block is GENESIS
        if len(qc.signers) < self.params.quorum:
            return False
        voters = {v for v, _ in qc.signers}
        if len(voters) != len(qc.signers):
            return False
        data = wire.encode_vote(int(qc.phase), qc.view, qc.block.digest)
        return all(self.auth.verify(v, data, s) for v, s in qc.signers)

    def _vote_valid(self, vt: Vote) -> bool:
        if not self.auth.verify(vt.voter, wire.encode_vote(int(vt.phase), vt.view, vt.block.digest), vt.signature):
            return False
        e = vt.extension
        if e is not None:
            if e.view != vt.view or e.voter != vt.voter:
                return False
            if not self.auth.verify(e.voter, e.signing_bytes, e.signature):
                return False
        return True

    def _vc_valid(self, m: ViewChange) -> bool:
        data = wire.encode_view_change(m.view, m.high_qc.view, m.high_qc.block.digest, m.sender)
        if not self.auth.verify(m.sender, data, m.signature):
            return False
        e = m.extension
        if self.election.uses_certificates:
            if e is None or e.view != m.view or e.voter != m.sender:
                return False
            if not self.auth.verify(e.voter, e.signing_bytes, e.signature):
                return False
        return self._qc_valid(m.high_qc)

    def _update_high(self, qc: QuorumCertificate) -> None:
        if qc.rank() > self.state.high_qc.rank():
            self.state.high_qc = qc
        self.blocks.setdefault(qc.block.digest, qc.block)

    def _vote(self, view: int, phase: Phase, block: Block, ext: Optional[VoteExtension]) -> Vote:
        sig = self.auth.sign(self.id, wire.encode_vote(int(phase), view, block.digest))
        return Vote(view, phase, block, self.id, ext, sig)

    # ------------------------------------------------------------------ views

    def start(self) -> None:
        self._enter(1)

    def _complete(self, v: int) -> None:
        self.election.complete(v)

    def _enter(self, v: int) -> None:
        st = self.state
        st.view = v
        st.phase = None
        st.accepted = None
        known = self.election.elected_known(v)
        st.leader = self.election.on_enter(v)
        st.deadline = self.now + self.timeout_us
        self.timers.append((v, st.deadline))
        self.obs.entered(self.id, v, st.leader, known, self.now)
        # prune collections for views that can no longer matter
        for key in [k for k in st.votes if k[0] < v - 1]:
            del st.votes[key]
        for key in [k for k in st.view_changes if k < v - 1]:
            del st.view_changes[key]
        for key in [k for k in self.tallies if k[0] < v - 1]:
            del self.tallies[key]
        self._try_propose(v)
        for p in self.pending.pop(v, ()):
            self.on_proposal(p)
        for key in [k for k in self.pending if k < v]:
            del self.pending[key]

    def _skip_to(self, v: int) -> None:
        """Jump the window forward to ``v`` without entering the skipped views."""
        st = self.state
        if st.view >= v:
            return
        while st.view < v:
            self._complete(st.view)
            st.view += 1
        st.phase = None
        st.accepted = None
        st.leader = self.election.determine(v)

    def _advance_past(self, v: int) -> None:
        """Leave view ``v`` (decided or timed out) and enter ``v + 1``."""
        if self.state.view < v:
            self._skip_to(v)
        self._complete(v)
        self._enter(v + 1)

    # -------------------------------------------------------------- proposing

    def _quorum_for_me(self, msgs, digest: Optional[bytes] = None):
        q = self.params.quorum
        uses_cert = self.election.uses_certificates
        picked = []
        for m in msgs:
            if uses_cert and (m.extension is None or m.extension.leader != self.id):
                continue
            if digest is not None and m.block.digest != digest:
                continue
            picked.append(m)
            if len(picked) == q:
                return picked
        return None

    def _try_propose(self, v: int) -> None:
        st = self.state
        if st.view != v or v in self.proposed:
            return
        p = self.params
        cert = None
        tc = None
        justify = st.high_qc
        if v == 1:
            if self.election.determine(1) != self.id:
                return
        else:
            decided_prev = justify.view == v - 1 and justify.phase is Phase.COMMIT
            if self.election.uses_certificates:
                exts = None
                commits = st.votes.get((v - 1, Phase.COMMIT))
                if commits and decided_prev:
                    picked = self._quorum_for_me(commits.values(), justify.block.digest)
                    if picked:
                        exts = [m.extension for m in picked]
                if exts is None:
                    vcs = st.view_changes.get(v - 1)
                    picked = self._quorum_for_me(vcs.values()) if vcs else None
                    if picked is None:
                        return
                    exts = [m.extension for m in picked]
                    if not decided_prev:
                        tc = tuple(picked)
                cert = core.package_certificate(exts, core.target_view(v - 1, p), p, self.auth)
            else:
                if self.election.determine(v) != self.id:
                    return
                if not decided_prev:
                    vcs = st.view_changes.get(v - 1)
                    if not vcs or len(vcs) < p.quorum:
                        return
                    tc = tuple(list(vcs.values())[: p.quorum])
            if tc is not None:
                for m in tc:
                    self._update_high(m.high_qc)
                justify = st.high_qc
        self.proposed.add(v)
        batch_id, n_ops = self.obs.take_batch(self.id, v)
        block = Block(v, justify.block, self.id, batch_id, n_ops, self.op_bytes, cert)
        self.blocks[block.digest] = block
        self.my_blocks[v] = block.digest
        sig = self.auth.sign(self.id, wire.encode_proposal(v, block.digest, self.id))
        self._send(None, Proposal(v, block, justify, cert, tc, self.id, sig))

    # --------------------------------------------------------------- handlers

    def on_message(self, msg) -> None:
        t = type(msg)
        if t is Vote:
            self.on_vote(msg)
        elif t is Certify:
            self.on_certify(msg)
        elif t is Proposal:
            self.on_proposal(msg)
        elif t is Decide:
            self.on_decide(msg.qc)
        elif t is ViewChange:
            self.on_view_change(msg)

    def _entry_evidence(self, p: Proposal) -> bool:
        """Whether ``p`` proves that view ``p.view - 1`` is over."""
        j = p.justify
        if j.view == p.view - 1 and j.phase is Phase.COMMIT and self._qc_valid(j):
            self.on_decide(j)
            return self.view >= p.view
        tc = p.timeout_cert
        if tc and len({m.sender for m in tc}) >= self.params.quorum and all(
                m.view == p.view - 1 and self._vc_valid(m) for m in tc):
            for m in tc:
                self._update_high(m.high_qc)
            if self.view < p.view - 1:
                self._skip_to(p.view - 1)
            if self.view == p.view - 1:
                self._timeout(p.view - 1)
            return True
        return False

    def on_proposal(self, p: Proposal) -> Optional[str]:
        st = self.state
        if p.view < st.view:
            return "WrongView"
        if p.view > st.view and not self._entry_evidence(p):
            self.pending.setdefault(p.view, []).append(p)
            return "WrongView"
        if p.view != st.view:
            return "WrongView"
        if (p.view, Phase.PREPARE) in self.voted:
            return "Duplicate"
        if not self.auth.verify(p.proposer, wire.encode_proposal(p.view, p.block.digest, p.proposer), p.signature):
            return "BadSignature"
        if (p.block.view != p.view or p.block.proposer != p.proposer or p.block.parent is not p.justify.block
                or p.block.leader_cert is not p.leader_cert):
            return "BadBlock"
        if not self._qc_valid(p.justify):
            return "BadJustify"
        lock = st.locked_qc
        if not (p.block.extends(lock.block) or p.justify.view > lock.view):
            return "SafetyViolation"
        key = (p.leader_cert, p.proposer, p.view)
        ok = self.verdicts.get(key)
        if ok is None:
            try:
                self.election.check_cert(p.leader_cert, p.proposer, p.view)
                ok = True
            except core.InvalidCertificate:
                ok = False
            self._remember(key, ok)
        if not ok:
            return "BadCert"
        if p.leader_cert is None and p.proposer != self.election.determine(p.view):
            return "IllegitimateProposer"
        self._update_high(p.justify)
        self.blocks[p.block.digest] = p.block
        if p.proposer != st.leader:
            st.leader = p.proposer
            self.obs.redetermined(self.id, p.view, p.proposer)
        self.obs.claim_accepted(self.id, p.view, p.proposer, p.leader_cert)
        st.accepted = p
        st.phase = Phase.PREPARE
        self.voted.add((p.view, Phase.PREPARE))
        self._send(p.proposer, self._vote(p.view, Phase.PREPARE, p.block, None))
        return None

    def on_vote(self, vt: Vote) -> None:
        st = self.state
        if vt.view < st.view - 1:
            return
        key = (vt.view, vt.phase)
        if vt.phase is not Phase.COMMIT and key in self.certified:
            return  # quorum already formed; later votes carry nothing new
        bucket = st.votes.setdefault(key, {})
        if vt.voter in bucket or not self._vote_valid(vt):
            return
        bucket[vt.voter] = vt
        q = self.params.quorum
        digest = vt.block.digest
        tally = self.tallies.setdefault((vt.view, vt.phase, digest), [])
        tally.append(vt)
        if vt.phase is Phase.PREPARE:
            if vt.view in self.proposed:
                order = self.prepare_order.setdefault(vt.view, [])
                if len(order) < q and digest == self.my_blocks.get(vt.view):
                    order.append(vt.voter)
        if vt.phase is Phase.COMMIT and st.view == vt.view + 1:
            self._try_propose(st.view)
        if key in self.certified or len(tally) < q:
            return
        matching = tally
        if vt.phase is not Phase.COMMIT and vt.view not in self.proposed:
            return
        self.certified.add(key)
        signers = tuple((m.voter, m.signature) for m in matching[:q])
        qc = QuorumCertificate(vt.view, vt.phase, vt.block, signers)
        self.obs.quorum_formed(self.id, qc)
        if vt.phase is Phase.COMMIT:
            if vt.view in self.proposed:
                self._send(None, Decide(qc, self.id))
            self.on_decide(qc)
            self._try_propose(vt.view + 1)
        else:
            self._send(None, Certify(qc, self.id))

    def on_certify(self, m: Certify) -> None:
        st = self.state
        qc = m.qc
        acc = st.accepted
        if qc.view != st.view or acc is None or acc.block.digest != qc.block.digest:
            return
        if qc.phase is Phase.COMMIT or not self._qc_valid(qc):
            return
        self._update_high(qc)
        if qc.phase is Phase.PREPARE:
            if (qc.view, Phase.PRECOMMIT) in self.voted:
                return
            self.voted.add((qc.view, Phase.PRECOMMIT))
            st.phase = Phase.PRECOMMIT
            self._send(acc.proposer, self._vote(qc.view, Phase.PRECOMMIT, qc.block, None))
        else:
            if (qc.view, Phase.COMMIT) in self.voted:
                return
            self.voted.add((qc.view, Phase.COMMIT))
            if qc.view > st.locked_qc.view:
                st.locked_qc = qc
            st.phase = Phase.COMMIT
            ext = self.election.extension(qc.view)
            vote = self._vote(qc.view, Phase.COMMIT, qc.block, ext)
            self._send(acc.proposer, vote)
            nxt = ext.leader if ext is not None else self.election.determine(qc.view + 1)
            if nxt != acc.proposer:
                self._send(nxt, vote)

    def on_decide(self, qc: QuorumCertificate) -> None:
        if qc.phase is not Phase.COMMIT or qc.view in self.finalized:
            return
        if not self._qc_valid(qc):
            return
        self._update_high(qc)
        w = qc.view
        if w > self.view:
            self._skip_to(w)
        chain = []
        b: Optional[Block] = qc.block
        while b is not None and b.view > self.last_final.view:
            chain.append(b)
            b = b.parent
        if b is not self.last_final and b is not None and b.digest != self.last_final.digest:
            raise SafetyViolation(f"replica {self.id}: block of view {w} does not extend last finalized view {self.last_final.view}")
        for blk in reversed(chain):
            self._finalize(blk)
        if w in self.proposed and w in self.prepare_order:
            self.election.on_led(self.prepare_order.pop(w)[: self.params.quorum])
        if w == self.view:
            self._advance_past(w)

    def _finalize(self, blk: Block) -> None:
        prior = self.finalized.get(blk.view)
        if prior is not None and prior != blk.digest:
            raise SafetyViolation(f"replica {self.id} finalized two blocks in view {blk.view}")
        self.finalized[blk.view] = blk.digest
        self.last_final = blk
        self.election.on_finalized(blk, blk.leader_cert, self.view)
        self.obs.finalized(self.id, blk, self.now)

    def on_timer(self, view: int) -> None:
        if view == self.view and view not in self.timed_out_views:
            self._timeout(view)

    def _timeout(self, v: int) -> None:
        st = self.state
        self.timed_out_views.add(v)
        self.election.on_timeout(v, st.leader)
        self.obs.timed_out(self.id, v, self.now)
        ext = self.election.extension(v)
        qc = st.high_qc
        sig = self.auth.sign(self.id, wire.encode_view_change(v, qc.view, qc.block.digest, self.id))
        msg = ViewChange(v, qc, ext, self.id, sig)
        self._send(None, msg)
        self.on_view_change(msg, local=True)
        if self.view == v:
            self._advance_past(v)

    def on_view_change(self, m: ViewChange, local: bool = False) -> None:
        st = self.state
        if m.view < st.view - 1:
            return
        bucket = st.view_changes.setdefault(m.view, {})
        if m.sender in bucket or (not local and not self._vc_valid(m)):
            return
        bucket[m.sender] = m
        self._update_high(m.high_qc)
        if m.view >= st.view and m.view not in self.timed_out_views and len(bucket) >= self.params.f + 1:
            if m.view > st.view:
                self._skip_to(m.view)
            self._timeout(m.view)
        if st.view == m.view + 1:
            self._try_propose(m.view + 1)
