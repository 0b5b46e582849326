"""Per-view records and the evaluation metrics computed from them."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

CSV_COLUMNS = ("view", "leader", "unified", "leader_correct", "finalized", "timed_out", "entry_us", "decide_us", "ops")


class InsufficientHorizon(ValueError):
    pass


@dataclass
class ViewRecord:
    view: int
    leaders: dict[int, int]  # correct replica -> leader it acted on
    leader: Optional[int]
    unified: bool
    leader_correct: bool
    finalized: bool
    timed_out: bool
    entry_us: Optional[int]
    decide_us: Optional[int]
    ops: int = 0
    latency_sum_us: int = 0
    elected_known: bool = True

    def row(self) -> list:
        return [
            self.view,
            "" if self.leader is None else self.leader,
            int(self.unified),
            int(self.leader_correct),
            int(self.finalized),
            int(self.timed_out),
            "" if self.entry_us is None else self.entry_us,
            "" if self.decide_us is None else self.decide_us,
            self.ops,
        ]


def majority_leader(leaders: dict[int, int]) -> Optional[int]:
    if not leaders:
        return None
    counts = Counter(leaders.values())
    best = max(counts.values())
    return min(l for l, c in counts.items() if c == best)


def make_record(view: int, leaders: dict[int, int], faulty: set[int], finalized: bool,
                entry_us: Optional[int], decide_us: Optional[int], ops: int = 0,
                latency_sum_us: int = 0, elected_known: bool = True) -> ViewRecord:
    leader = majority_leader(leaders)
    unified = len(set(leaders.values())) == 1
    return ViewRecord(
        view=view,
        leaders=dict(leaders),
        leader=leader,
        unified=unified,
        leader_correct=leader is not None and leader not in faulty,
        finalized=finalized,
        timed_out=not finalized,
        entry_us=entry_us,
        decide_us=decide_us,
        ops=ops,
        latency_sum_us=latency_sum_us,
        elected_known=elected_known,
    )


# ---------------------------------------------------------------- throughput


@dataclass
class SeriesPoint:
    start_us: int
    end_us: int
    throughput: float  # ops per second
    latency_ms: Optional[float]


@dataclass
class Series:
    points: list[SeriesPoint]
    throughput_avg: float
    latency_avg_ms: Optional[float]


def averages(records: Sequence[ViewRecord]) -> tuple[float, Optional[float]]:
    ops = sum(r.ops for r in records)
    end = max((t for r in records for t in (r.decide_us, r.entry_us) if t is not None), default=0)
    thr = ops / (end / 1e6) if end > 0 else 0.0
    lat = sum(r.latency_sum_us for r in records) / ops / 1000.0 if ops else None
    return thr, lat


def instantaneous_series(records: Sequence[ViewRecord], window_ms: Optional[float] = None,
                         window_views: int = 50) -> Series:
    """Throughput/latency over sliding windows of simulated time or of views.

    With ``window_ms`` the ops finalized in each ``[k*w, (k+1)*w)`` time
    window are counted; otherwise each group of ``window_views`` consecutive
    views forms one window spanning their entry times.
    """
    if not records:
        raise ValueError("no records")
    thr_avg, lat_avg = averages(records)
    done = [r for r in records if r.finalized and r.decide_us is not None and r.ops]
    points: list[SeriesPoint] = []
    if not done:
        return Series(points, thr_avg, lat_avg)
    if window_ms is not None:
        w = int(window_ms * 1000)
        buckets: dict[int, list[ViewRecord]] = {}
        for r in done:
            buckets.setdefault(r.decide_us // w, []).append(r)
        for k in range(0, max(buckets) + 1):
            rs = buckets.get(k, [])
            ops = sum(r.ops for r in rs)
            lat = sum(r.latency_sum_us for r in rs) / ops / 1000.0 if ops else None
            points.append(SeriesPoint(k * w, (k + 1) * w, ops / (w / 1e6), lat))
    else:
        for i in range(0, len(records), window_views):
            chunk = records[i:i + window_views]
            start = chunk[0].entry_us or 0
            if i + window_views < len(records) and records[i + window_views].entry_us is not None:
                end = records[i + window_views].entry_us
            else:
                end = max((t for r in chunk for t in (r.decide_us, r.entry_us) if t is not None), default=start)
            ops = sum(r.ops for r in chunk)
            lat = sum(r.latency_sum_us for r in chunk) / ops / 1000.0 if ops else None
            span = end - start
            points.append(SeriesPoint(start, end, ops / (span / 1e6) if span > 0 else 0.0, lat))
    return Series(points, thr_avg, lat_avg)


# ------------------------------------------------------------ leader quality


def faulty_leader_rate(records: Sequence[ViewRecord], faulty: Iterable[int]) -> float:
    """Percentage of views whose majority-determined leader is faulty."""
    faulty = set(faulty)
    if not records:
        return 0.0
    bad = sum(1 for r in records if r.leader is not None and r.leader in faulty)
    return 100.0 * bad / len(records)


def timeout_rate(records: Sequence[ViewRecord]) -> float:
    if not records:
        return 0.0
    return 100.0 * sum(r.timed_out for r in records) / len(records)


def measure_v_c(records: Sequence[ViewRecord], gst_view: int) -> int:
    """Smallest view at or after ``gst_view`` past which every entry knew its elected leader."""
    last_bad = 0
    for r in records:
        if r.view >= gst_view and not r.elected_known:
            last_bad = r.view
    return max(gst_view, last_bad)


@dataclass
class GammaReport:
    window: int
    counts: list[int]
    mean: Optional[float]
    gamma: float
    gamma_t: float
    sup: float
    v_c: int

    def to_dict(self) -> dict:
        return {
            "window": self.window,
            "windows": len(self.counts),
            "mean": self.mean,
            "min": min(self.counts) if self.counts else None,
            "gamma": self.gamma,
            "gamma_t": self.gamma_t,
            "sup": self.sup,
            "v_c": self.v_c,
        }


def gamma_sup(n: int, f: int, theta: int, t_z: int) -> float:
    return n - (n / theta * f) * (1 + t_z / n)


def gamma_windows(records: Sequence[ViewRecord], n: int, f: int, theta: int, t_z: int, v_c: int) -> GammaReport:
    after = [r for r in records if r.view > v_c]
    k = len(after) // n
    if k == 0:
        raise InsufficientHorizon(f"no complete {n}-view window after v_c={v_c}")
    counts = [sum(1 for r in after[i * n:(i + 1) * n] if r.unified and r.leader_correct) for i in range(k)]
    gamma = (2 * f + 1) / n
    return GammaReport(n, counts, sum(counts) / k, gamma, gamma * n, gamma_sup(n, f, theta, t_z), v_c)


# ------------------------------------------------------------------- output


def to_csv(records: Sequence[ViewRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def _clean(x):
    if isinstance(x, float):
        return None if math.isnan(x) else round(x, 6)
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


def summary_json(summary: dict) -> str:
    return json.dumps(_clean(summary), indent=2, sort_keys=True) + "\n"
