"""End-to-end experiment driver: streams, baselines, metrics, sweeps.

One experiment = one seeded timeline driving owner uploads, the truncated
transformation, the chosen sync protocol (or a baseline), the periodic flush,
and a count query. Everything is deterministic given (config, seed).
"""

from __future__ import annotations

import enum
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable

import numpy as np

from .leakage import LogicalStream, StreamRecord, Transcript, TranscriptKind
from .obliv import SecureCache, SecureTuple, SeqCounter
from .randomness import ServerRandomness
from .sharing import RING_SIZE
from .shrink import (AntConfig, FlushReport, MaterializedView, SyncReport,
                     TimerConfig, flush_step, sdp_ant_init, sdp_ant_step,
                     sdp_timer_step)
from .transform import (ChargePolicy, OperatorKind, TransformState,
                        TruncationConfig, expected_output_size, transform_init,
                        transform_step)


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class ParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class CapacityExceeded(ValueError):
    """More records arrived in one step than the owner batch can carry."""


class Protocol(enum.Enum):
    DP_TIMER = "DPTimer"
    DP_ANT = "DPANT"
    OTM = "OTM"
    EP = "EP"
    NM = "NM"


class Profile(enum.Enum):
    STANDARD = "Standard"
    SPARSE = "Sparse"
    BURST = "Burst"


@dataclass
class ExperimentConfig:
    protocol: Protocol = Protocol.DP_TIMER
    operator: OperatorKind = OperatorKind.SMJ
    epsilon: float = 1.5
    b: int = 10
    omega: int = 1
    T: int = 10
    theta: float = 30.0
    f: int = 2000
    s: int = 15
    c_r: int = 5
    horizon: int = 2000
    query_interval: int = 1
    seed: int = 0
    profile: Profile = Profile.STANDARD
    multiplicity: int = 1
    stream_a: str | None = None
    stream_b: str | None = None
    scan_cache: bool = False
    charge_policy: ChargePolicy = ChargePolicy.PER_INVOCATION_OMEGA
    trials: int = 1


_POSITIVE = {"c_r", "horizon", "query_interval", "omega", "b", "multiplicity", "trials"}


def validate_config(config: ExperimentConfig) -> ExperimentConfig:
    for name in _POSITIVE:
        if getattr(config, name) < 1:
            raise ConfigError(f"{name} must be >= 1, got {getattr(config, name)}")
    if config.omega > config.b:
        raise ConfigError(f"omega ({config.omega}) must not exceed b ({config.b})")
    if config.protocol in (Protocol.DP_TIMER, Protocol.DP_ANT):
        if config.epsilon <= 0:
            raise ConfigError("DP protocols require epsilon > 0")
        if config.f < 1 or config.s < 0:
            raise ConfigError("flush parameters require f >= 1 and s >= 0")
    if config.protocol is Protocol.DP_TIMER and config.T < 1:
        raise ConfigError("DPTimer requires update interval T >= 1")
    if config.protocol is Protocol.DP_ANT and config.theta <= 0:
        raise ConfigError("DPANT requires sync threshold theta > 0")
    if (config.stream_a is None) != (config.stream_b is None) and \
            config.operator is not OperatorKind.FILTER:
        raise ConfigError("join operators need both stream files or a profile")
    return config


def parse_config_file(path: str) -> dict[str, str]:
    """Flat key=value lines; '#' starts a comment."""
    values: dict[str, str] = {}
    known = {f.name for f in fields(ExperimentConfig)}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = value
    return values


_ENUM_FIELDS = {"protocol": Protocol, "operator": OperatorKind,
                "profile": Profile, "charge_policy": ChargePolicy}


def coerce_config(values: dict[str, str]) -> ExperimentConfig:
    """Build a config from string key=value pairs (file or CLI overrides)."""
    kwargs = {}
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    defaults = ExperimentConfig()
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        if key in _ENUM_FIELDS:
            enum_cls = _ENUM_FIELDS[key]
            try:
                kwargs[key] = enum_cls(raw)
            except ValueError:
                valid = ", ".join(e.value for e in enum_cls)
                raise ConfigError(f"{key} must be one of: {valid}") from None
            continue
        current = getattr(defaults, key)
        try:
            if key in ("stream_a", "stream_b"):
                kwargs[key] = raw or None
            elif isinstance(current, bool):
                kwargs[key] = raw.lower() in ("1", "true", "yes", "on")
            elif isinstance(current, int):
                kwargs[key] = int(raw)
            elif isinstance(current, float):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return validate_config(ExperimentConfig(**kwargs))


@dataclass
class MetricsRecord:
    time: int
    l1_error: float
    relative_error: float
    view_rows_total: int
    view_rows_real: int
    deferred_real: int
    discarded_by_truncation: int
    cost_proxy: int
    transcript_events: int


def emit_metrics(records: Iterable[MetricsRecord], path: str) -> None:
    """One JSON object per line, snake_case fields, byte-deterministic."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec), sort_keys=False, separators=(",", ":")))
            fh.write("\n")


def read_metrics(path: str) -> list[MetricsRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(MetricsRecord(**json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# Streams.

def load_stream(path: str) -> LogicalStream:
    """CSV with header t,key,attr...; integer fields; rows stable-sorted by t."""
    arrivals: list[StreamRecord] = []
    with open(path) as fh:
        header = fh.readline()
        if not header:
            raise ParseError("missing header", 1)
        cols = [c.strip() for c in header.strip().split(",")]
        if len(cols) < 2 or cols[0] != "t" or cols[1] != "key":
            raise ParseError(f"header must start with 't,key', got {header.strip()!r}", 1)
        n_attrs = len(cols) - 2
        for lineno, raw in enumerate(fh, start=2):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(cols):
                raise ParseError(f"expected {len(cols)} fields, got {len(parts)}", lineno)
            try:
                values = [int(p) for p in parts]
            except ValueError:
                raise ParseError(f"non-integer field in {line!r}", lineno) from None
            if values[0] < 1:
                raise ParseError(f"time must be >= 1, got {values[0]}", lineno)
            if not 0 <= values[1] < RING_SIZE:
                raise ParseError(f"key out of 32-bit range: {values[1]}", lineno)
            arrivals.append(StreamRecord(values[0], values[1], tuple(values[2:2 + n_attrs])))
    arrivals.sort(key=lambda r: r.t)  # stable
    horizon = max((r.t for r in arrivals), default=0)
    return LogicalStream(arrivals, horizon)


def client_batches(stream: LogicalStream, c_r: int, horizon: int,
                   seqs: SeqCounter | None = None) -> list[list[SecureTuple]]:
    """Per-step fixed-size owner batches: real arrivals padded with dummies."""
    seqs = seqs or SeqCounter()
    width = len(stream.arrivals[0].attrs) if stream.arrivals else 1
    by_step: dict[int, list[StreamRecord]] = {}
    for rec in stream.arrivals:
        if rec.t <= horizon:
            by_step.setdefault(rec.t, []).append(rec)
    batches = []
    for t in range(1, horizon + 1):
        recs = by_step.get(t, [])
        if len(recs) > c_r:
            raise CapacityExceeded(
                f"step {t}: {len(recs)} arrivals exceed owner batch size {c_r}")
        batch = [SecureTuple(key=r.key, attrs=r.attrs, is_view=True,
                             seq=seqs.take(), timestamp=t) for r in recs]
        while len(batch) < c_r:
            batch.append(SecureTuple(key=0, attrs=(0,) * width, is_view=False,
                                     seq=seqs.take(), timestamp=t))
        batches.append(batch)
    return batches


_BURST_PERIOD = 40
_BURST_ON = 20


def synth_stream(profile: Profile, seed: int, horizon: int,
                 multiplicity: int = 1, pairs_per_step: float = 2.5,
                 cap: int = 5) -> tuple[LogicalStream, LogicalStream]:
    """Paired join streams with a controlled expected match count.

    Owner A receives records with fresh keys; for each "matched" A key,
    `multiplicity` B records carrying that key arrive within the next step,
    so every matched group contributes exactly `multiplicity` join pairs.
    Sparse carries 10% of Standard's expected pairs; Burst carries 2x,
    delivered in on/off duty cycles (20 loaded steps out of every 40). Burst
    runs need an owner batch size of about 12 to carry the spikes. Per-step
    arrivals are capped at `cap` per owner; overflow spills deterministically
    into following steps.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    group_rate = pairs_per_step / multiplicity
    if profile is Profile.SPARSE:
        group_rate *= 0.1
    noise_rate = min(0.5, group_rate * 0.2)

    pend_a: dict[int, list[StreamRecord]] = {}
    pend_b: dict[int, list[StreamRecord]] = {}
    next_key = 1
    matched_flag = 1

    def scheduled_groups(t: int) -> int:
        if profile is Profile.BURST:
            # 2x the standard load, concentrated in the on-phase.
            if (t - 1) % _BURST_PERIOD >= _BURST_ON:
                return 0
            lam = 2 * group_rate * _BURST_PERIOD / _BURST_ON
            return int(rng.poisson(lam))
        return int(rng.poisson(group_rate))

    for t in range(1, horizon + 1):
        for _ in range(scheduled_groups(t)):
            key = next_key
            next_key += 1
            pend_a.setdefault(t, []).append(
                StreamRecord(t, key, (matched_flag, int(rng.integers(1000)))))
            for i in range(multiplicity):
                bt = t + (i % 2)
                pend_b.setdefault(bt, []).append(
                    StreamRecord(bt, key, (matched_flag, int(rng.integers(1000)))))
        if rng.random() < noise_rate:
            pend_a.setdefault(t, []).append(
                StreamRecord(t, (1 << 30) + next_key, (0, int(rng.integers(1000)))))
            next_key += 1
        if rng.random() < noise_rate:
            pend_b.setdefault(t, []).append(
                StreamRecord(t, (1 << 31) + next_key, (0, int(rng.integers(1000)))))
            next_key += 1

    def drain(pending: dict[int, list[StreamRecord]]) -> list[StreamRecord]:
        out: list[StreamRecord] = []
        carry: list[StreamRecord] = []
        for t in range(1, horizon + 1):
            queue = carry + pending.get(t, [])
            take, carry = queue[:cap], queue[cap:]
            out.extend(StreamRecord(t, r.key, r.attrs) for r in take)
        return out

    a = drain(pend_a)
    b = drain(pend_b)
    return LogicalStream(a, horizon), LogicalStream(b, horizon)


# ---------------------------------------------------------------------------
# Queries.

def query_count(view: MaterializedView, predicate=None, t: int | None = None,
                cache: SecureCache | None = None) -> int:
    """Count synchronized real rows satisfying the predicate.

    Passing `cache` additionally scans unsynchronized rows (the optional
    cache-scan query mode).
    """
    rows = view.rows if cache is None else view.rows + cache.entries
    total = 0
    for row in rows:
        if row.is_view and (t is None or row.timestamp <= t) \
                and (predicate is None or predicate(row)):
            total += 1
    return total


def true_count(stream_a: LogicalStream, stream_b: LogicalStream | None,
               operator: OperatorKind, t: int, predicate=None) -> int:
    """Plaintext oracle over the logical databases, no truncation.

    Filter counts records with a nonzero first attribute (or the predicate);
    joins count key-matching pairs, brute force.
    """
    if operator is OperatorKind.FILTER:
        total = 0
        for rec in stream_a.arrivals:
            if rec.t <= t:
                keep = predicate(rec) if predicate else bool(rec.attrs and rec.attrs[0])
                total += bool(keep)
        return total
    assert stream_b is not None
    left = [r for r in stream_a.arrivals if r.t <= t]
    right = [r for r in stream_b.arrivals if r.t <= t]
    return sum(1 for a in left for b in right if a.key == b.key)


class _JoinCounter:
    """Incremental key-match pair counter, equal to the brute-force oracle."""

    def __init__(self):
        self._left: dict[int, int] = {}
        self._right: dict[int, int] = {}
        self.total = 0

    def add_left(self, key: int) -> None:
        self.total += self._right.get(key, 0)
        self._left[key] = self._left.get(key, 0) + 1

    def add_right(self, key: int) -> None:
        self.total += self._left.get(key, 0)
        self._right[key] = self._right.get(key, 0) + 1

    def sizes(self) -> tuple[int, int]:
        return sum(self._left.values()), sum(self._right.values())


# ---------------------------------------------------------------------------
# The experiment loop.

@dataclass
class ExperimentResult:
    config: ExperimentConfig
    metrics: list[MetricsRecord]
    transcript: Transcript
    sync_reports: list[SyncReport] = field(default_factory=list)
    flush_reports: list[FlushReport] = field(default_factory=list)
    produced_rows: list[SecureTuple] = field(default_factory=list)
    shrink_cost_per_step: list[int] = field(default_factory=list)
    final_view: MaterializedView | None = None
    final_cache: SecureCache | None = None


def _streams_for(config: ExperimentConfig) -> tuple[LogicalStream, LogicalStream | None]:
    if config.stream_a is not None:
        a = load_stream(config.stream_a)
        b = load_stream(config.stream_b) if config.stream_b else None
        return a, b
    a, b = synth_stream(config.profile, config.seed, config.horizon,
                        config.multiplicity, cap=config.c_r)
    if config.operator is OperatorKind.FILTER:
        return a, None
    return a, b


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    validate_config(config)
    stream_a, stream_b = _streams_for(config)
    seqs = SeqCounter()
    rand = ServerRandomness(config.seed)
    transcript = Transcript()

    batches_a = client_batches(stream_a, config.c_r, config.horizon, seqs)
    batches_b = (client_batches(stream_b, config.c_r, config.horizon, seqs)
                 if stream_b is not None else None)
    n_owners = 1 if batches_b is None else 2

    trunc = TruncationConfig(config.omega, config.b, config.charge_policy)
    state = TransformState(config=trunc, operator=config.operator, seqs=seqs,
                           predicate=(lambda tup: bool(tup.attrs and tup.attrs[0]))
                           if config.operator is OperatorKind.FILTER else None)
    counter = transform_init(rand)
    cache = SecureCache()
    view = MaterializedView()
    width = 0
    if config.operator is OperatorKind.FILTER:
        width = len(stream_a.arrivals[0].attrs) if stream_a.arrivals else 1
    else:
        wa = len(stream_a.arrivals[0].attrs) if stream_a.arrivals else 1
        wb = len(stream_b.arrivals[0].attrs) if stream_b and stream_b.arrivals else 1
        width = wa + wb

    timer_cfg = TimerConfig(config.T, config.epsilon, config.b, config.f, config.s) \
        if config.protocol is Protocol.DP_TIMER else None
    ant_cfg = AntConfig(config.theta, config.epsilon, config.b, config.f, config.s) \
        if config.protocol is Protocol.DP_ANT else None
    threshold = sdp_ant_init(ant_cfg, rand) if ant_cfg else None

    join_tracker = _JoinCounter()
    filter_true = 0
    arrivals_a: dict[int, list[StreamRecord]] = {}
    for rec in stream_a.arrivals:
        arrivals_a.setdefault(rec.t, []).append(rec)
    arrivals_b: dict[int, list[StreamRecord]] = {}
    if stream_b is not None:
        for rec in stream_b.arrivals:
            arrivals_b.setdefault(rec.t, []).append(rec)

    result = ExperimentResult(config=config, metrics=[], transcript=transcript)
    otm_synced = False

    for t in range(1, config.horizon + 1):
        cost = [0]
        fetched_rows = 0
        shrink_cost = [0]

        # Owners upload fixed-size blocks; both servers observe the sizes.
        if config.protocol is not Protocol.NM:
            for _ in range(n_owners):
                for server in (0, 1):
                    transcript.add(t, server, TranscriptKind.OWNER_UPLOAD, config.c_r)
            new_batches = [batches_a[t - 1]]
            if batches_b is not None:
                new_batches.append(batches_b[t - 1])

        # Maintain the plaintext truth incrementally.
        for rec in arrivals_a.get(t, []):
            if config.operator is OperatorKind.FILTER:
                filter_true += bool(rec.attrs and rec.attrs[0])
            else:
                join_tracker.add_left(rec.key)
        if stream_b is not None:
            for rec in arrivals_b.get(t, []):
                join_tracker.add_right(rec.key)

        if config.protocol in (Protocol.DP_TIMER, Protocol.DP_ANT, Protocol.EP):
            cache, counter = transform_step(t, new_batches, cache, counter, state,
                                            rand, transcript, cost)
        elif config.protocol is Protocol.OTM and not otm_synced:
            cache, counter = transform_step(t, new_batches, cache, counter, state,
                                            rand, transcript, cost)

        if config.protocol is Protocol.DP_TIMER:
            counter, cache, report = sdp_timer_step(
                t, timer_cfg, counter, cache, view, rand, transcript, seqs,
                width, shrink_cost)
            if report.triggered:
                result.sync_reports.append(report)
                fetched_rows += report.size
            cache, flush = flush_step(t, timer_cfg, cache, view, transcript,
                                      seqs, width, shrink_cost)
            if flush.flushed:
                result.flush_reports.append(flush)
                fetched_rows += flush.size
        elif config.protocol is Protocol.DP_ANT:
            counter, threshold, cache, report = sdp_ant_step(
                t, ant_cfg, counter, threshold, cache, view, rand, transcript,
                seqs, width, shrink_cost)
            if report.triggered:
                result.sync_reports.append(report)
                fetched_rows += report.size
            cache, flush = flush_step(t, ant_cfg, cache, view, transcript,
                                      seqs, width, shrink_cost)
            if flush.flushed:
                result.flush_reports.append(flush)
                fetched_rows += flush.size
        elif config.protocol is Protocol.EP:
            # Exhaustive padding: the whole padded delta goes straight in.
            sz = len(cache)
            view.append_batch(cache.entries, t)
            cache = SecureCache()
            fetched_rows += sz
            for server in (0, 1):
                transcript.add(t, server, TranscriptKind.SYNC_BATCH, sz)
        elif config.protocol is Protocol.OTM and not otm_synced:
            sz = len(cache)
            view.append_batch(cache.entries, t)
            cache = SecureCache()
            fetched_rows += sz
            for server in (0, 1):
                transcript.add(t, server, TranscriptKind.SYNC_BATCH, sz)
            otm_synced = True

        cost[0] += shrink_cost[0]
        result.shrink_cost_per_step.append(shrink_cost[0])

        if t % config.query_interval == 0:
            truth = filter_true if config.operator is OperatorKind.FILTER \
                else join_tracker.total
            if config.protocol is Protocol.NM:
                answered = truth
                if config.operator is OperatorKind.FILTER:
                    scan = stream_a.count_up_to(t)
                else:
                    na, nb = join_tracker.sizes()
                    scan = na * nb
                deferred = 0
                discarded = 0
            else:
                answered = query_count(view, cache=cache if config.scan_cache else None)
                scan = view.total_rows() + (len(cache) if config.scan_cache else 0)
                deferred = cache.real_count()
                discarded = truth - view.real_rows() - deferred
            l1 = abs(truth - answered)
            result.metrics.append(MetricsRecord(
                time=t,
                l1_error=float(l1),
                relative_error=float(l1) / max(1, truth),
                view_rows_total=view.total_rows(),
                view_rows_real=view.real_rows(),
                deferred_real=deferred,
                discarded_by_truncation=discarded,
                cost_proxy=cost[0] + fetched_rows + scan,
                transcript_events=len(transcript),
            ))

    result.produced_rows = state.produced_rows
    result.final_view = view
    result.final_cache = cache
    return result


def run_trials(config: ExperimentConfig, trials: int,
               max_workers: int = 4) -> list[ExperimentResult]:
    """Independent seeded runs (seed + index), merged by trial index."""
    configs = []
    for i in range(trials):
        kwargs = asdict(config)
        kwargs["seed"] = config.seed + i
        kwargs["trials"] = 1
        configs.append(ExperimentConfig(**kwargs))
    with ThreadPoolExecutor(max_workers=min(max_workers, trials)) as pool:
        return list(pool.map(run_experiment, configs))


def expected_transform_size(config: ExperimentConfig):
    """Audit helper: t -> padded transform output size under this config."""
    trunc = TruncationConfig(config.omega, config.b, config.charge_policy)

    def size(t: int) -> int:
        return expected_output_size(config.operator, t, config.c_r, 2, trunc)

    return size
