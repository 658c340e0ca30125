"""Adversary-view transcripts, reference DP mechanisms, and empirical checks.

The reference mechanisms mirror the sync protocols' observable behavior from
the logical stream alone: what an adversary may learn is at most what these
mechanisms release. The empirical estimator measures privacy loss between
neighboring streams; the audit asserts that every transcript size is either a
function of public configuration or a coupled DP release.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .dpnoise import NoiseScale
from .randomness import SeededLaplace
from .shrink import ant_scales, clamp_round, timer_scale


class NeighborViolation(ValueError):
    """The two streams do not differ by exactly one logical update."""


class TranscriptKind(enum.Enum):
    OWNER_UPLOAD = "OwnerUpload"
    TRANSFORM_OUTPUT = "TransformOutput"
    SYNC_BATCH = "SyncBatch"
    FLUSH_BATCH = "FlushBatch"
    SHARE_RECEIVED = "ShareReceived"
    COMPARE_CHECK = "CompareCheck"


@dataclass(frozen=True, slots=True)
class TranscriptEvent:
    time: int
    server: int
    kind: TranscriptKind
    size: int
    share_value: int | None = None


class Transcript:
    """Ordered per-server record of observed sizes, timestamps and shares."""

    def __init__(self):
        self.events: list[TranscriptEvent] = []

    def add(self, time: int, server: int, kind: TranscriptKind, size: int,
            share_value: int | None = None) -> None:
        self.events.append(TranscriptEvent(time, server, kind, size, share_value))

    def by_kind(self, kind: TranscriptKind, server: int | None = None) -> list[TranscriptEvent]:
        return [e for e in self.events
                if e.kind is kind and (server is None or e.server == server)]

    def __len__(self) -> int:
        return len(self.events)


class StreamRecord(NamedTuple):
    t: int
    key: int
    attrs: tuple[int, ...]


@dataclass
class LogicalStream:
    """Insertion-only growing database: time-stamped records."""

    arrivals: list[StreamRecord]
    horizon: int

    def arrivals_per_step(self, horizon: int | None = None) -> np.ndarray:
        h = horizon if horizon is not None else self.horizon
        counts = np.zeros(h + 1, dtype=np.int64)
        for rec in self.arrivals:
            if 1 <= rec.t <= h:
                counts[rec.t] += 1
        return counts

    def count_up_to(self, t: int) -> int:
        return sum(1 for rec in self.arrivals if rec.t <= t)


def assert_neighbors(a: LogicalStream, b: LogicalStream) -> None:
    """Neighbors differ by the addition or removal of one logical update."""
    from collections import Counter
    ca = Counter(a.arrivals)
    cb = Counter(b.arrivals)
    diff = ca - cb
    rdiff = cb - ca
    n_extra = sum(diff.values())
    n_missing = sum(rdiff.values())
    if (n_extra, n_missing) not in ((1, 0), (0, 1)):
        raise NeighborViolation(
            f"streams differ by {n_extra} additions and {n_missing} removals")


# ---------------------------------------------------------------------------
# Reference mechanisms.

def m_timer(stream: LogicalStream, T: int, b: float, epsilon: float,
            seed: int | None = None, noise=None,
            horizon: int | None = None) -> list[tuple[int, float]]:
    """Noisy per-window arrival counts at every multiple of T."""
    if noise is None:
        noise = SeededLaplace(0 if seed is None else seed)
    h = horizon if horizon is not None else stream.horizon
    counts = stream.arrivals_per_step(h)
    scale = timer_scale(b, epsilon)
    out = []
    for t in range(T, h + 1, T):
        c = int(counts[max(0, t - T + 1): t + 1].sum())
        out.append((t, c + noise.laplace(scale)))
    return out


def m_ant(stream: LogicalStream, theta: float, b: float, epsilon: float,
          seed: int | None = None, noise=None, horizon: int | None = None,
          variant: str = "protocol") -> list[tuple[int, float | None]]:
    """Sparse-vector release of counts-since-last-release.

    Draw order matches the threshold protocol exactly: initial threshold,
    one check per step, then release noise and a threshold refresh on each
    trigger. variant selects the output-noise scale ("protocol" couples with
    the running protocol; "proof" matches the reference analysis).
    """
    if noise is None:
        noise = SeededLaplace(0 if seed is None else seed)
    h = horizon if horizon is not None else stream.horizon
    counts = stream.arrivals_per_step(h)
    th_scale, check_scale, out_scale = ant_scales(b, epsilon, variant)
    noisy_th = theta + noise.laplace(th_scale)
    out: list[tuple[int, float | None]] = []
    since = 0
    for t in range(1, h + 1):
        since += int(counts[t])
        check = since + noise.laplace(check_scale)
        if check >= noisy_th:
            released = since + noise.laplace(out_scale)
            out.append((t, released))
            noisy_th = theta + noise.laplace(th_scale)
            since = 0
        else:
            out.append((t, None))
    return out


def nant(stream: LogicalStream, epsilon: float, theta: float, delta_f: float,
         seed: int | None = None, noise=None,
         horizon: int | None = None) -> tuple[int, float] | None:
    """Numeric above-noisy-threshold: one release at the first crossing."""
    if noise is None:
        noise = SeededLaplace(0 if seed is None else seed)
    h = horizon if horizon is not None else stream.horizon
    counts = stream.arrivals_per_step(h)
    eps1 = epsilon / 2
    eps2 = epsilon / 2
    noisy_th = theta + noise.laplace(NoiseScale(2 * delta_f, eps1))
    c = 0
    for t in range(1, h + 1):
        v_t = noise.laplace(NoiseScale(4 * delta_f, eps1))
        c += int(counts[t])
        if c + v_t >= noisy_th:
            return (t, c + noise.laplace(NoiseScale(2 * delta_f, eps2)))
    return None


# Vectorized trial runners for the empirical estimator.

class TimerMechanism:
    def __init__(self, T: int, b: float, epsilon: float, horizon: int | None = None,
                 stability: int = 1):
        self.T, self.b, self.epsilon, self.horizon = T, b, epsilon, horizon
        self.stability = stability  # view entries produced per logical update

    def __call__(self, stream: LogicalStream, rng) -> list[float]:
        noise = SeededLaplace(rng)
        outs = m_timer(_scaled(stream, self.stability), self.T, self.b,
                       self.epsilon, noise=noise, horizon=self.horizon)
        return [v for _, v in outs]

    def run_many(self, stream: LogicalStream, trials: int, rng) -> np.ndarray:
        s = _scaled(stream, self.stability)
        h = self.horizon if self.horizon is not None else s.horizon
        counts = s.arrivals_per_step(h)
        sync_ts = range(self.T, h + 1, self.T)
        base = np.array([counts[max(0, t - self.T + 1): t + 1].sum() for t in sync_ts],
                        dtype=np.float64)
        u = rng.random((trials, len(base)))
        d = u - 0.5
        scale = timer_scale(self.b, self.epsilon).scale
        noise = -scale * np.sign(d) * np.log1p(-2.0 * np.abs(d))
        return base[None, :] + noise


class AntMechanism:
    def __init__(self, theta: float, b: float, epsilon: float,
                 horizon: int | None = None, variant: str = "proof",
                 stability: int = 1):
        self.theta, self.b, self.epsilon = theta, b, epsilon
        self.horizon, self.variant, self.stability = horizon, variant, stability

    def __call__(self, stream: LogicalStream, rng) -> list[float]:
        noise = SeededLaplace(rng)
        outs = m_ant(_scaled(stream, self.stability), self.theta, self.b,
                     self.epsilon, noise=noise, horizon=self.horizon,
                     variant=self.variant)
        return [0.0 if v is None else v for _, v in outs]

    def run_many(self, stream: LogicalStream, trials: int, rng) -> np.ndarray:
        s = _scaled(stream, self.stability)
        h = self.horizon if self.horizon is not None else s.horizon
        counts = s.arrivals_per_step(h)
        cum = np.cumsum(counts)
        th_scale, check_scale, out_scale = ant_scales(self.b, self.epsilon, self.variant)

        def lap(scale, size):
            d = rng.random(size) - 0.5
            return -scale * np.sign(d) * np.log1p(-2.0 * np.abs(d))

        noisy_th = self.theta + lap(th_scale.scale, trials)
        last_cum = np.zeros(trials)
        out = np.zeros((trials, h))
        for t in range(1, h + 1):
            since = cum[t] - last_cum
            check = since + lap(check_scale.scale, trials)
            trig = check >= noisy_th
            if trig.any():
                out[trig, t - 1] = since[trig] + lap(out_scale.scale, int(trig.sum()))
                noisy_th[trig] = self.theta + lap(th_scale.scale, int(trig.sum()))
                last_cum[trig] = cum[t]
        return out


def _scaled(stream: LogicalStream, stability: int) -> LogicalStream:
    """Each logical update yields `stability` view entries (q-stable transform)."""
    if stability == 1:
        return stream
    arrivals = [rec for rec in stream.arrivals for _ in range(stability)]
    return LogicalStream(arrivals, stream.horizon)


def empirical_privacy_loss(mechanism, stream_a: LogicalStream,
                           stream_b: LogicalStream, trials: int,
                           seed: int = 0, min_bin: int | None = None) -> float:
    """Estimate max_o |ln(Pr_a[o] / Pr_b[o])| over binned output vectors.

    Outputs are quantized to integers per timestep; bins need at least
    min_bin samples on both sides to enter the maximum. The default cutoff
    grows with the trial count (never below 100) so the sampling noise on a
    qualifying bin's log-ratio stays well under the scales being measured.
    Identical streams are accepted as a degenerate case (the estimator's
    noise floor).
    """
    if min_bin is None:
        min_bin = max(100, trials // 20)
    if sorted(stream_a.arrivals) != sorted(stream_b.arrivals):
        assert_neighbors(stream_a, stream_b)
    rng_a = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[0])
    rng_b = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])

    def histogram(stream, rng):
        if hasattr(mechanism, "run_many"):
            arr = mechanism.run_many(stream, trials, rng)
            quantized = np.floor(arr + 0.5).astype(np.int64)
            bins: dict[tuple, int] = {}
            for row in quantized:
                key = tuple(row.tolist())
                bins[key] = bins.get(key, 0) + 1
            return bins
        bins = {}
        for _ in range(trials):
            vec = mechanism(stream, rng)
            key = tuple(clamp_quantize(v) for v in vec)
            bins[key] = bins.get(key, 0) + 1
        return bins

    bins_a = histogram(stream_a, rng_a)
    bins_b = histogram(stream_b, rng_b)
    worst = 0.0
    for key, ca in bins_a.items():
        cb = bins_b.get(key, 0)
        if ca >= min_bin and cb >= min_bin:
            worst = max(worst, abs(math.log(ca / cb)))
    return worst


def clamp_quantize(v: float) -> int:
    return math.floor(v + 0.5)


# ---------------------------------------------------------------------------
# Transcript audit.

@dataclass
class AuditExpectation:
    """Public-configuration sizes the transcript must match.

    sync_sizes maps sync time -> expected batch size (clamped, rounded oracle
    release); when sync_equals_transform is set instead, each step's sync must
    equal that step's padded transform size (exhaustive-padding baselines).
    """

    owner_batch: int | None = None
    transform_size: Callable[[int], int] | None = None
    flush_interval: int | None = None
    flush_size: int | None = None
    sync_sizes: dict[int, int] | None = None
    sync_equals_transform: bool = False


@dataclass
class AuditReport:
    passed: bool
    violations: list[str] = field(default_factory=list)

    def lines(self) -> str:
        if self.passed:
            return "audit: pass\n"
        return "".join(v + "\n" for v in self.violations)


def transcript_audit(transcript: Transcript, expect: AuditExpectation) -> AuditReport:
    """Flag any event size that is neither config-determined nor a DP release."""
    violations: list[str] = []

    def flag(e: TranscriptEvent, reason: str) -> None:
        violations.append(
            f"t={e.time} server={e.server} kind={e.kind.value} size={e.size}: {reason}")

    seen_syncs: set[int] = set()
    for e in transcript.events:
        if e.kind is TranscriptKind.OWNER_UPLOAD:
            if expect.owner_batch is not None and e.size != expect.owner_batch:
                flag(e, f"owner upload size must equal batch size {expect.owner_batch}")
        elif e.kind is TranscriptKind.TRANSFORM_OUTPUT:
            if expect.transform_size is not None and e.size != expect.transform_size(e.time):
                flag(e, f"transform output size must equal padded size "
                        f"{expect.transform_size(e.time)}")
        elif e.kind is TranscriptKind.FLUSH_BATCH:
            if expect.flush_interval is not None and e.time % expect.flush_interval != 0:
                flag(e, f"flush outside schedule (interval {expect.flush_interval})")
            if expect.flush_size is not None and e.size != expect.flush_size:
                flag(e, f"flush size must equal configured {expect.flush_size}")
        elif e.kind is TranscriptKind.SYNC_BATCH:
            seen_syncs.add(e.time)
            if expect.sync_sizes is not None:
                want = expect.sync_sizes.get(e.time)
                if want is None:
                    flag(e, "sync at a time with no coupled release")
                elif e.size != want:
                    flag(e, f"sync size must equal coupled DP release {want}")
            elif expect.sync_equals_transform:
                if expect.transform_size is None or e.size != expect.transform_size(e.time):
                    flag(e, "sync size must equal padded transform size")
        elif e.kind in (TranscriptKind.SHARE_RECEIVED, TranscriptKind.COMPARE_CHECK):
            if e.size != 0:
                flag(e, "share/check events must carry no size")
    if expect.sync_sizes is not None:
        for t in sorted(set(expect.sync_sizes) - seen_syncs):
            violations.append(f"t={t} kind=SyncBatch: expected release missing")
    return AuditReport(passed=not violations, violations=violations)
