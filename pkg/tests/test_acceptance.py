"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL ...`` line (visible with
``pytest -s``).  The simulation sweep is expensive, so it runs once per
session and is shared by the criteria that read its results.  Set
``SWLE_ACCEPT_SEEDS`` to change the number of seeds per scenario (default 20).
"""

import os
import random
import statistics
import time
from dataclasses import dataclass, replace

import pytest

from swle import config
from swle.auth import SimAuthenticator
from swle.core import (
    InvalidCertificate,
    LeaderCertificate,
    Params,
    ReputationMatrix,
    ScoreEvent,
    apply_score_event,
    make_extension,
    package_certificate,
    select_leader,
    target_view,
    verify_certificate,
)
from swle.metrics import gamma_sup
from swle.sim import run

SCENARIOS = ("case1", "case2", "case3", "fault_free", "adversarial_pregst")
SEEDS = int(os.environ.get("SWLE_ACCEPT_SEEDS", "20"))
RATIO_SEEDS = min(5, SEEDS)
SWEEP_BUDGET_S = 600


def report(number, ok, detail):
    print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {detail}")


# ------------------------------------------------------------ pure checks


def test_criterion_1_target_windows_are_bijective():
    start = time.perf_counter()
    bad = []
    for n in (4, 7, 10, 16, 100):
        p = Params(n)
        for x in range(3 * n + 1):
            src = range(x * n + 1, x * n + n + 1)
            lo = x * n + 1 + p.t_z + n
            images = sorted(target_view(v, p) for v in src)
            if images != list(range(lo, lo + n)):
                bad.append((n, x))
    elapsed = time.perf_counter() - start
    ok = not bad and elapsed < 5.0
    report(1, ok, f"violations={len(bad)} elapsed={elapsed:.2f}s")
    assert not bad, bad[:5]
    assert elapsed < 5.0


def test_criterion_2_gap_at_least_window_core():
    rng = random.Random(2024)
    bad = []
    for _ in range(100_000):
        n = 3 * rng.randint(1, 40) + 1
        p = Params(n, t_f=rng.randint(1, 4 * n))
        v = rng.randint(1, 10**6)
        t = target_view(v, p)
        if not (t - (v + 1) >= p.t_z and t < v + p.window):
            bad.append((v, n, p.t_f))
    report(2, not bad, f"violations={len(bad)} of 100000")
    assert not bad, bad[:5]


def _replay(params, start_points, events):
    m = ReputationMatrix.from_points(params, start_points)
    for e in events:
        apply_score_event(m, e, params)
    return m.scores


def test_criterion_3_scoring_replay():
    cases = []
    p4 = Params(4)
    # n=4: one unit is a quarter point; start at 1 point = 4 units
    cases.append((
        _replay(p4, [1] * 4, [
            ScoreEvent.enter_view(1),        # r1: 0
            ScoreEvent.finalized(1),         # r1: 4
            ScoreEvent.promoters([0, 1, 2]),  # +1 each
            ScoreEvent.enter_view(2),        # r2: 1
            ScoreEvent.timeout(2),           # r2: clamp 0
        ]),
        [5, 5, 0, 4],
    ))
    # clamp at zero, then recovery only through R5
    cases.append((
        _replay(p4, [1] * 4, [ScoreEvent.timeout(3), ScoreEvent.timeout(3), ScoreEvent.refresh()]),
        [8, 8, 8, 4],
    ))
    p16 = Params(16)
    cases.append((
        _replay(p16, [1] * 16, [
            ScoreEvent.enter_view(3), ScoreEvent.finalized(3), ScoreEvent.promoters(range(11)),
            ScoreEvent.enter_view(4), ScoreEvent.timeout(4),
            ScoreEvent.enter_view(5), ScoreEvent.finalized(5), ScoreEvent.refresh(),
        ]),
        [33] * 3 + [33, 16, 33] + [33] * 5 + [32] * 5,
    ))
    # a replica entering 2*theta views (no certificates, so leaders rotate):
    # R1 on every entry, R5 before R1 at each multiple of theta
    from swle.engine import SwleElection

    el = SwleElection(p4, 0, SimAuthenticator(4))
    oracle = [4] * 4
    for v in range(1, 2 * p4.theta + 1):
        el.on_enter(v)
        el.complete(v)
        if v % p4.theta == 0:
            oracle = [s + 4 for s in oracle]
        oracle[v % 4] = max(oracle[v % 4] - 4, 0)
    cases.append((el.matrix.scores, oracle))
    mismatches = [(got, want) for got, want in cases if got != want]
    report(3, not mismatches, f"sequences={len(cases)} mismatches={len(mismatches)}")
    assert not mismatches, mismatches


def _random_votes(rng, p, auth):
    view = rng.randint(1, 10**5)
    leader = rng.randrange(p.n)
    t = target_view(view, p)
    voters = rng.sample(range(p.n), p.quorum)
    votes = []
    for v in voters:
        cands = rng.sample(range(p.n), rng.randint(1, p.n))
        votes.append(make_extension(view, leader, t, cands, v, auth))
    return votes, view, leader, t


def _mutate(rng, cert, p, auth):
    votes = list(cert.votes)
    i = rng.randrange(len(votes))
    e = votes[i]
    field = rng.choice(["view", "leader", "target_view", "candidates", "voter", "signature",
                        "resigned_view", "resigned_target", "elected", "cert_target", "drop"])
    if field == "elected":
        others = [x for x in [None, *range(p.n)] if x != cert.elected]
        return LeaderCertificate(cert.target_view, rng.choice(others), cert.votes), field
    if field == "cert_target":
        return LeaderCertificate(cert.target_view + rng.choice([-1, 1]), cert.elected, cert.votes), field
    if field == "drop":
        return LeaderCertificate(cert.target_view, cert.elected, tuple(votes[:-1])), field
    if field == "view":
        e = replace(e, view=e.view + 1)
    elif field == "leader":
        e = replace(e, leader=(e.leader + 1) % p.n)
    elif field == "target_view":
        e = replace(e, target_view=e.target_view + 1)
    elif field == "candidates":
        c = list(e.candidates)
        if len(c) < p.n and rng.random() < 0.5:
            c.append(next(x for x in range(p.n) if x not in c))
        else:
            c = c[1:] if len(c) > 1 else [(c[0] + 1) % p.n]
        e = replace(e, candidates=tuple(c))
    elif field == "voter":
        e = replace(e, voter=(e.voter + rng.randrange(1, p.n)) % p.n)
    elif field == "signature":
        sig = bytearray(e.signature)
        sig[rng.randrange(len(sig))] ^= 1 << rng.randrange(8)
        e = replace(e, signature=bytes(sig))
    elif field == "resigned_view":
        # validly signed by its voter, but from another view than the rest
        e = make_extension(e.view + 1, e.leader, e.target_view, e.candidates, e.voter, auth)
    elif field == "resigned_target":
        e = make_extension(e.view, e.leader, e.target_view + 1, e.candidates, e.voter, auth)
    votes[i] = e
    return LeaderCertificate(cert.target_view, cert.elected, tuple(votes)), field


def test_criterion_4_certificate_round_trip():
    rng = random.Random(4)
    auths = {n: SimAuthenticator(n) for n in (4, 7, 10, 16)}
    rejected_ok = accepted_ok = agree = 0
    failures = []
    trials = 10_000
    for k in range(trials):
        n = rng.choice(list(auths))
        p, auth = Params(n), auths[n]
        votes, view, leader, t = _random_votes(rng, p, auth)
        cert = package_certificate(votes, t, p, auth)
        try:
            verify_certificate(cert, leader, view + 1, p, auth)
            accepted_ok += 1
        except InvalidCertificate as exc:
            failures.append(("accept", k, exc.reason))
        # an independent verifier with its own key table reaches the same outcome
        other = package_certificate(list(reversed(votes)), t, p, SimAuthenticator(n))
        again = select_leader((e.candidates for e in cert.votes), t, p)
        if other.elected == cert.elected == again:
            agree += 1
        else:
            failures.append(("agree", k, cert.elected, other.elected))
        bad, field = _mutate(rng, cert, p, auth)
        try:
            verify_certificate(bad, leader, view + 1, p, auth)
            failures.append(("mutation accepted", k, field))
        except InvalidCertificate:
            rejected_ok += 1
    ok = not failures
    report(4, ok, f"accepted={accepted_ok}/{trials} mutations_rejected={rejected_ok}/{trials} "
                  f"elected_agree={agree}/{trials}")
    assert not failures, failures[:5]


# ------------------------------------------------------------ simulation sweep


@dataclass
class RunResult:
    scenario: str
    seed: int
    summary: dict
    digest: str
    tail_known: bool  # every view after v_c had elected leaders at all correct entries
    error: str = ""


def _simulate(cfg, seed):
    from swle.sim import InvariantViolation

    try:
        rep = run(cfg, seed)
    except InvariantViolation as exc:
        return RunResult(cfg.name, seed, {}, "", False, str(exc))
    v_c = rep.summary["v_c"]
    tail = all(r.elected_known for r in rep.records if r.view > v_c)
    return RunResult(cfg.name, seed, rep.summary, rep.digest(), tail)


@pytest.fixture(scope="session")
def sweep():
    results = {}
    start = time.perf_counter()
    for name in SCENARIOS:
        cfg = config.preset(name)
        for seed in range(1, SEEDS + 1):
            results[name, seed] = _simulate(cfg, seed)
    return results, time.perf_counter() - start


@pytest.fixture(scope="session")
def roundrobin():
    out = {}
    for name in ("case1", "case2", "fault_free"):
        cfg = config.preset(name, mechanism="roundrobin")
        for seed in range(1, RATIO_SEEDS + 1):
            out[name, seed] = run(cfg, seed).summary
    return out


def test_criterion_5_safety_and_unique_leadership(sweep):
    results, elapsed = sweep
    errors = [(k, r.error) for k, r in results.items() if r.error]
    ok = not errors and elapsed < SWEEP_BUDGET_S
    report(5, ok, f"runs={len(results)} ({SEEDS} seeds x {len(SCENARIOS)} scenarios) "
                  f"violations={len(errors)} elapsed={elapsed:.0f}s budget={SWEEP_BUDGET_S}s")
    assert not errors, errors[:3]
    assert elapsed < SWEEP_BUDGET_S


def test_criterion_6_timely_finalization(sweep):
    results, _ = sweep
    bad = []
    worst_recovery = 0
    for (name, seed), r in results.items():
        if r.error:
            bad.append((name, seed, "violation"))
            continue
        s = r.summary
        p = Params(s["n"])
        if not (s["v_c"] < s["views"] and r.tail_known):
            bad.append((name, seed, "no v_c"))
        if name == "adversarial_pregst":
            recovery = s["v_c"] - s["gst_view"]
            worst_recovery = max(worst_recovery, recovery)
            if s["gst_view"] > s["views"] or recovery > p.theta + 2 * p.n:
                bad.append((name, seed, f"recovery {recovery}"))
    p16 = Params(16)
    report(6, not bad, f"runs_without_finite_v_c={len(bad)} "
                       f"worst_adversarial_recovery={worst_recovery} bound={p16.theta + 2 * p16.n}")
    assert not bad, bad[:5]


def _mean(values):
    return statistics.fmean(values)


def test_criterion_7_faulty_leader_frequency(sweep, roundrobin):
    results, _ = sweep
    lines, ok = [], True
    for name, swle_max, rr_lo, rr_hi in (("case1", 3.0, 5.0, 8.0), ("case2", 10.0, 16.0, 21.0)):
        sw = [results[name, s].summary["faulty_leader_pct"] for s in range(1, SEEDS + 1)]
        rr = [roundrobin[name, s]["faulty_leader_pct"] for s in range(1, RATIO_SEEDS + 1)]
        good = _mean(sw) < swle_max and rr_lo <= _mean(rr) <= rr_hi
        ok &= good
        lines.append(f"{name}: swle mean={_mean(sw):.2f}% max={max(sw):.2f}% (<{swle_max}) "
                     f"rr mean={_mean(rr):.2f}% (in [{rr_lo}, {rr_hi}])")
    report(7, ok, "; ".join(lines))
    assert ok


def test_criterion_8_throughput_ratio(sweep, roundrobin):
    results, _ = sweep

    def ratios(name):
        return [results[name, s].summary["throughput_avg"] / roundrobin[name, s]["throughput_avg"]
                for s in range(1, RATIO_SEEDS + 1)]

    case1, free = _mean(ratios("case1")), _mean(ratios("fault_free"))
    ok = case1 >= 3.0 and 0.95 <= free <= 1.05
    report(8, ok, f"case1 ratio={case1:.2f} (>=3.0) fault_free ratio={free:.3f} (in [0.95, 1.05])")
    assert ok


def test_criterion_9_gamma_bracket(sweep):
    results, _ = sweep
    p = Params(16)
    sup = gamma_sup(p.n, p.f, p.theta, p.t_z)
    lo = p.quorum
    means, bad = [], []
    for name in ("case1", "case2"):
        for s in range(1, SEEDS + 1):
            g = results[name, s].summary.get("gamma_report")
            if not g or g["mean"] is None or not lo <= g["mean"] <= p.n:
                bad.append((name, s, g and g["mean"]))
            else:
                means.append(g["mean"])
    detail = (f"mean C range=[{min(means):.2f}, {max(means):.2f}] " if means else "") + \
             f"bracket=[{lo}, {p.n}] sup={sup:.4f} out_of_bracket={len(bad)}"
    report(9, not bad, detail)
    assert not bad, bad[:5]


def test_criterion_10_determinism(sweep):
    results, _ = sweep
    mismatched = []
    for name in SCENARIOS:
        again = _simulate(config.preset(name), 1)
        if again.digest != results[name, 1].digest:
            mismatched.append(name)
    report(10, not mismatched, f"scenarios_rerun={len(SCENARIOS)} byte_mismatches={len(mismatched)}")
    assert not mismatched, mismatched
