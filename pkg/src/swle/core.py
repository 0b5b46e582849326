"""Sliding-window leader election: scoring, leader bookkeeping and certificates.

Everything here is protocol independent.  A consensus engine owns one
:class:`ReputationMatrix` and one :class:`LeaderList` per replica and drives
them through the module level functions below.

Scores are kept as integers in units of ``1/n`` of a reputation point, so the
only fractional reward (``+1/n`` for consensus-promoting voters) becomes ``+1``
and every replica that replays the same events lands on identical state.
"""

from __future__ import annotations

import enum
import math
from collections import Counter
from fractions import Fraction
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Sequence

from swle import wire
from swle.auth import Authenticator

NONE = None  # empty elected-leader slot
BOT = None  # "no winner" outcome of a candidate selection


class SwleError(Exception):
    """Base class for errors raised by the election core."""


class MalformedVoteSet(SwleError):
    pass


class OutOfWindow(SwleError):
    pass


class WindowOrderError(SwleError):
    pass


class Reject(enum.Enum):
    BAD_SIGNATURE = "BadSignature"
    WRONG_CLAIMANT = "WrongClaimant"
    WRONG_TARGET = "WrongTarget"
    SELECTION_MISMATCH = "SelectionMismatch"
    MALFORMED_VOTE_SET = "MalformedVoteSet"


class InvalidCertificate(SwleError):
    def __init__(self, reason: Reject, detail: str = ""):
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason


@dataclass(frozen=True)
class Params:
    """Static election parameters for a system of ``n = 3f + 1`` replicas.

    ``t_f`` defaults to ``n - 1`` which makes the window core ``t_z`` equal to
    ``n``.  ``theta`` is the period of the universal score refresh.
    """

    n: int
    t_f: Optional[int] = None
    theta: Optional[int] = None
    f: int = field(init=False)
    t_z: int = field(init=False)
    alphas: tuple[int, int, int, int, int] = field(init=False)

    def __post_init__(self):
        n = self.n
        if n < 1 or (n - 1) % 3:
            raise ValueError(f"n must be 3f+1 for some f >= 0, got {n}")
        t_f = n - 1 if self.t_f is None else self.t_f
        if t_f < 1:
            # n=1 leaves no room for a positive default; fall back to one view.
            if self.t_f is not None:
                raise ValueError("t_f must be a positive integer")
            t_f = 1
        theta = max(300, 10 * n) if self.theta is None else self.theta
        t_z = math.ceil(t_f / n) * n
        if theta < n:
            raise ValueError(f"theta must be >= n, got {theta}")
        object.__setattr__(self, "t_f", t_f)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "f", (n - 1) // 3)
        object.__setattr__(self, "t_z", t_z)
        # enter view, timeout, finalized, promoter, refresh -- in 1/n units
        object.__setattr__(self, "alphas", (-n, -n * n, n, 1, n))

    @property
    def quorum(self) -> int:
        return 2 * self.f + 1

    @property
    def window(self) -> int:
        return self.t_z + 2 * self.n

    @property
    def point(self) -> int:
        """Score units per reputation point."""
        return self.n


def initial_leader(v: int, n: int) -> int:
    return v % n


# --------------------------------------------------------------------------
# scoring


class Rule(enum.Enum):
    R1 = "enter_view"
    R2 = "timeout"
    R3 = "finalized"
    R4 = "promoters"
    R5 = "refresh"


@dataclass(frozen=True)
class ScoreEvent:
    rule: Rule
    replicas: tuple[int, ...] = ()

    @classmethod
    def enter_view(cls, leader: int) -> "ScoreEvent":
        return cls(Rule.R1, (leader,))

    @classmethod
    def timeout(cls, leader: int) -> "ScoreEvent":
        return cls(Rule.R2, (leader,))

    @classmethod
    def finalized(cls, leader: int) -> "ScoreEvent":
        return cls(Rule.R3, (leader,))

    @classmethod
    def promoters(cls, voters: Iterable[int]) -> "ScoreEvent":
        return cls(Rule.R4, tuple(voters))

    @classmethod
    def refresh(cls) -> "ScoreEvent":
        return cls(Rule.R5)


_RULE_ALPHA = {Rule.R1: 0, Rule.R2: 1, Rule.R3: 2, Rule.R4: 3, Rule.R5: 4}


class ReputationMatrix:
    """One replica's local view of everybody's score, in integer units."""

    __slots__ = ("owner", "scores", "n")

    def __init__(self, params: Params, owner: int = 0, scores: Optional[Sequence[int]] = None):
        self.n = params.n
        self.owner = owner
        if scores is None:
            self.scores = [abs(params.alphas[4])] * params.n
        else:
            if len(scores) != params.n or any(s < 0 for s in scores):
                raise ValueError("scores must be n non-negative integers")
            self.scores = [int(s) for s in scores]

    @classmethod
    def from_points(cls, params: Params, points: Sequence, owner: int = 0) -> "ReputationMatrix":
        units = []
        for p in points:
            u = p * params.n
            if u != int(u):
                raise ValueError(f"{p} is not a whole number of 1/n units")
            units.append(int(u))
        return cls(params, owner, units)

    def eligible(self, k: int) -> bool:
        # leadership eligibility needs at least |alpha_0| = one point
        return self.scores[k] >= self.n

    def add(self, k: int, delta: int) -> None:
        s = self.scores[k] + delta
        self.scores[k] = s if s > 0 else 0

    def points(self, k: int) -> Fraction:
        return Fraction(self.scores[k], self.n)

    def __eq__(self, other):
        return isinstance(other, ReputationMatrix) and self.scores == other.scores

    def __repr__(self):
        return f"ReputationMatrix(owner={self.owner}, scores={self.scores})"


def apply_score_event(matrix: ReputationMatrix, event: ScoreEvent, params: Params) -> ReputationMatrix:
    alpha = params.alphas[_RULE_ALPHA[event.rule]]
    if event.rule is Rule.R5:
        for k in range(params.n):
            matrix.add(k, alpha)
    else:
        for k in event.replicas:
            matrix.add(k, alpha)
    return matrix


# --------------------------------------------------------------------------
# target views


def target_view(v: int, params: Params) -> int:
    """View whose leader is elected by the votes cast in view ``v``.

    Each block of ``n`` source views ``{nx+1..n(x+1)}`` maps one-to-one onto
    ``{n(x+1)+1+T_z .. n(x+2)+T_z}``; the offset inside the block is rotated by
    ``x mod n`` so that every replica takes turns triggering every election.
    """
    if v < 1:
        raise ValueError(f"view must be >= 1, got {v}")
    n = params.n
    x = (v - 1) // n
    a = x % n
    r = v - n * x
    t = v + a + params.t_z
    return t + n if r + a <= n else t


# --------------------------------------------------------------------------
# leader list


@dataclass
class LeaderSlot:
    view: int
    initial_leader: int
    elected_leader: Optional[int]


class LeaderList:
    """Sliding window of ``T_z + 2n`` leader slots starting at the current view."""

    __slots__ = ("n", "size", "base_view", "_elected")

    def __init__(self, params: Params):
        self.n = params.n
        self.size = params.window
        self.base_view = 1
        filled = params.t_z + params.n
        self._elected: list[Optional[int]] = [
            v % self.n if v <= filled else None for v in range(1, self.size + 1)
        ]

    @property
    def last_view(self) -> int:
        return self.base_view + self.size - 1

    def covers(self, v: int) -> bool:
        return self.base_view <= v <= self.last_view

    def initial_leader(self, v: int) -> int:
        return v % self.n

    def elected_leader(self, v: int) -> Optional[int]:
        if not self.covers(v):
            raise OutOfWindow(f"view {v} outside [{self.base_view}, {self.last_view}]")
        return self._elected[v - self.base_view]

    def _set(self, v: int, leader: int) -> None:
        self._elected[v - self.base_view] = leader

    def slots(self) -> list[LeaderSlot]:
        return [LeaderSlot(self.base_view + i, (self.base_view + i) % self.n, e) for i, e in enumerate(self._elected)]

    def filled_prefix(self) -> int:
        """Number of leading slots with an elected leader."""
        try:
            return self._elected.index(None)
        except ValueError:
            return self.size

    def is_prefix_filled(self) -> bool:
        k = self.filled_prefix()
        return self._elected.count(None) == self.size - k

    def check(self) -> None:
        if len(self._elected) != self.size:
            raise AssertionError("leader list lost slots")
        if not self.is_prefix_filled():
            raise AssertionError(f"leader list not prefix-filled at base {self.base_view}: {self._elected}")


def apply_certificate(leaders: LeaderList, cert: "LeaderCertificate") -> LeaderList:
    t = cert.target_view
    if not leaders.covers(t):
        raise OutOfWindow(f"target view {t} outside [{leaders.base_view}, {leaders.last_view}]")
    leaders._set(t, leaders.initial_leader(t) if cert.elected is BOT else cert.elected)
    # fill the gap between the highest elected view below t and t
    v = t - 1
    while v >= leaders.base_view and leaders.elected_leader(v) is None:
        v -= 1
    for w in range(v + 1, t):
        leaders._set(w, leaders.initial_leader(w))
    return leaders


def advance_window(leaders: LeaderList, completed_view: int) -> LeaderList:
    if completed_view != leaders.base_view:
        raise WindowOrderError(f"cannot complete view {completed_view} while window starts at {leaders.base_view}")
    del leaders._elected[0]
    leaders._elected.append(None)
    leaders.base_view += 1
    return leaders


def determine_leader(leaders: LeaderList, v: int, proven_claim: Optional[int] = None) -> int:
    if proven_claim is not None:
        return proven_claim
    e = leaders.elected_leader(v)
    return leaders.initial_leader(v) if e is None else e


# --------------------------------------------------------------------------
# candidates and certificates


def generate_candidates(matrix: ReputationMatrix, leaders: LeaderList, v_target: int, params: Params) -> tuple[int, ...]:
    if v_target < leaders.base_view:
        raise ValueError(f"target view {v_target} precedes window base {leaders.base_view}")
    n = params.n
    while True:
        cands = tuple((v_target + i) % n for i in range(n) if matrix.eligible((v_target + i) % n))
        if cands:
            return cands
        # individual normalization; sticks in the caller's matrix
        apply_score_event(matrix, ScoreEvent.refresh(), params)


@dataclass(frozen=True, eq=True)
class VoteExtension:
    """Election fields piggybacked on a vote or view-change message of ``view``."""

    view: int
    leader: int  # the sender's determined leader for view + 1
    target_view: int
    candidates: tuple[int, ...]
    voter: int
    signature: bytes = b""

    @cached_property
    def signing_bytes(self) -> bytes:
        return wire.encode_extension(self.view, self.leader, self.target_view, self.candidates, self.voter)


def make_extension(view: int, leader: int, target: int, candidates: Sequence[int], voter: int, auth: Authenticator) -> VoteExtension:
    candidates = tuple(candidates)
    data = wire.encode_extension(view, leader, target, candidates, voter)
    ext = VoteExtension(view, leader, target, candidates, voter, auth.sign(voter, data))
    ext.__dict__["signing_bytes"] = data  # prime the cached encoding
    return ext


@dataclass(frozen=True, eq=False)
class LeaderCertificate:
    target_view: int
    elected: Optional[int]
    votes: tuple[VoteExtension, ...]

    @property
    def claimant(self) -> int:
        return self.votes[0].leader

    @property
    def view(self) -> int:
        return self.votes[0].view


def select_leader(candidate_arrays: Iterable[Sequence[int]], v_target: int, params: Params) -> Optional[int]:
    """Winner among candidates named in at least ``f + 1`` arrays, or ``BOT``.

    The winner is the qualifying replica whose turn as initial leader comes
    first at or after ``v_target``; those turns are distinct per replica.
    """
    count = Counter(c for arr in candidate_arrays for c in arr)
    winners = [c for c, k in count.items() if k >= params.f + 1]
    if not winners:
        return BOT
    n = params.n
    return min(winners, key=lambda c: (c - v_target) % n)


def _check_vote_set(votes: Sequence[VoteExtension], params: Params, auth: Optional[Authenticator]) -> None:
    n = params.n
    if len(votes) != params.quorum:
        raise InvalidCertificate(Reject.MALFORMED_VOTE_SET, f"{len(votes)} votes, need {params.quorum}")
    first = votes[0]
    voters = set()
    for e in votes:
        if e.voter in voters:
            raise InvalidCertificate(Reject.MALFORMED_VOTE_SET, f"duplicate voter {e.voter}")
        voters.add(e.voter)
        if not 0 <= e.voter < n or not 0 <= e.leader < n:
            raise InvalidCertificate(Reject.MALFORMED_VOTE_SET, "replica id out of range")
        if e.view != first.view or e.target_view != first.target_view or e.leader != first.leader:
            raise InvalidCertificate(Reject.MALFORMED_VOTE_SET, "votes disagree on view, target or determined leader")
        c = e.candidates
        if not c or len(c) > n or len(set(c)) != len(c) or any(not 0 <= x < n for x in c):
            raise InvalidCertificate(Reject.MALFORMED_VOTE_SET, f"invalid candidate array {c}")
    if auth is not None:
        for e in votes:
            if not auth.verify(e.voter, e.signing_bytes, e.signature):
                raise InvalidCertificate(Reject.BAD_SIGNATURE, f"vote extension from {e.voter}")


def package_certificate(votes: Iterable[VoteExtension], v_target: int, params: Params,
                        auth: Optional[Authenticator] = None) -> LeaderCertificate:
    votes = tuple(sorted(votes, key=lambda e: e.voter))
    try:
        _check_vote_set(votes, params, auth)
    except InvalidCertificate as exc:
        raise MalformedVoteSet(str(exc)) from exc
    if votes[0].target_view != v_target:
        raise MalformedVoteSet(f"votes target {votes[0].target_view}, expected {v_target}")
    elected = select_leader((e.candidates for e in votes), v_target, params)
    return LeaderCertificate(v_target, elected, votes)


def verify_certificate(cert: LeaderCertificate, proposer: int, proposal_view: int, params: Params,
                       auth: Optional[Authenticator] = None) -> None:
    """Raise :class:`InvalidCertificate` unless ``cert`` proves ``proposer`` leads ``proposal_view``."""
    votes = cert.votes
    _check_vote_set(votes, params, auth)
    if votes[0].leader != proposer:
        raise InvalidCertificate(Reject.WRONG_CLAIMANT, f"votes determine {votes[0].leader}, proposer is {proposer}")
    v = votes[0].view
    if v != proposal_view - 1 or v < 1:
        raise InvalidCertificate(Reject.WRONG_TARGET, f"votes from view {v} cannot open view {proposal_view}")
    expected = target_view(v, params)
    if cert.target_view != expected or votes[0].target_view != expected:
        raise InvalidCertificate(Reject.WRONG_TARGET, f"target {cert.target_view}, expected {expected}")
    if select_leader((e.candidates for e in votes), expected, params) != cert.elected:
        raise InvalidCertificate(Reject.SELECTION_MISMATCH, f"elected {cert.elected} does not follow from votes")


def certificate_is_valid(cert: LeaderCertificate, proposer: int, proposal_view: int, params: Params,
                         auth: Optional[Authenticator] = None) -> bool:
    try:
        verify_certificate(cert, proposer, proposal_view, params, auth)
    except InvalidCertificate:
        return False
    return True
