import hashlib
import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from caap.context import (
    DIGEST_SIZE,
    FIELD_RANGES,
    NUMERIC_FIELDS,
    ContextVector,
    Segment,
    TraceConfig,
    Urgency,
    canonical_bytes,
    context_hash,
    degrade_context,
    ingest_trace,
    normalized_distance,
    perturb_context,
    synth_trace,
    to_array,
    write_trace,
)
from caap.errors import ConfigError, TraceFormatError


def ctx(**kw):
    base = dict(timestamp_ms=1000, snr_db=12.0, per=0.05, speed_mps=20.0, accel_mps2=0.0,
                connectivity_horizon_s=8.0, urgency=Urgency.CONTROL, cpu_load=0.3)
    base.update(kw)
    return ContextVector(**base)


def test_context_vector_rejects_out_of_range_fields():
    with pytest.raises(ValueError, match="per"):
        ctx(per=1.2)
    with pytest.raises(ValueError, match="cpu_load"):
        ctx(cpu_load=-0.1)
    with pytest.raises(ValueError, match="connectivity_horizon_s"):
        ctx(connectivity_horizon_s=0.0)


def test_zero_drift_gives_constant_trace_at_initial_vector():
    cfg = TraceConfig(duration_s=2.0, drift_bounds={f: 0.0 for f in NUMERIC_FIELDS})
    xs = synth_trace(cfg)
    assert len(xs) == cfg.n_steps == 40
    A = to_array(xs)
    expected = np.array([cfg.initial[f] for f in NUMERIC_FIELDS])
    assert np.all(A == expected)


def test_same_seed_gives_identical_trace():
    cfg = TraceConfig(duration_s=5.0, rng_seed=42)
    a, b = synth_trace(cfg), synth_trace(cfg)
    assert a == b
    assert [context_hash(x) for x in a] == [context_hash(x) for x in b]


def test_timestamps_follow_cadence():
    xs = synth_trace(TraceConfig(duration_s=1.0, step_ms=20))
    ts = [x.timestamp_ms for x in xs]
    assert np.all(np.diff(ts) == 20)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), snr_bound=st.floats(0.0, 2.0))
def test_drift_bound_holds_over_whole_trace(seed, snr_bound):
    drift = {"snr_db": snr_bound, "per": 0.02, "cpu_load": 0.03}
    segs = [Segment(1.0, {"snr_db": 0.0, "per": 0.5}), Segment(1.0, {"snr_db": 30.0, "cpu_load": 0.9})]
    cfg = TraceConfig(duration_s=3.0, rng_seed=seed, drift_bounds=drift, segments=segs)
    A = to_array(synth_trace(cfg))
    steps = np.abs(np.diff(A, axis=0))
    for f, bound in cfg.drift_bounds.items():
        assert steps[:, NUMERIC_FIELDS.index(f)].max() <= bound + 1e-12


def test_snr_drift_bound_example():
    cfg = TraceConfig(duration_s=60.0, rng_seed=3, segments=[Segment(20, {"snr_db": 0.0}), Segment(40, {"snr_db": 30.0})])
    snr = to_array(synth_trace(cfg))[:, 0]
    assert np.max(np.abs(np.diff(snr))) <= 0.5


@pytest.mark.parametrize("kw, path", [
    ({"duration_s": 0.0}, "trace.duration_s"),
    ({"step_ms": 10}, "trace.step_ms"),
    ({"drift_bounds": {"snr_db": -1.0}}, "trace.drift_bounds.snr_db"),
    ({"urgency_mix": {"safety": 0.5, "control": 0.1, "telemetry": 0.1}}, "trace.urgency_mix"),
])
def test_invalid_trace_config_names_the_field(kw, path):
    with pytest.raises(ConfigError) as info:
        TraceConfig(**kw).validate()
    assert info.value.path == path


def test_ingest_empty_stream():
    assert ingest_trace(b"") == []


def test_ingest_rejects_out_of_range_per_with_row_number():
    buf = io.StringIO()
    write_trace(synth_trace(TraceConfig(duration_s=0.2)), buf)
    lines = buf.getvalue().splitlines()
    cells = lines[2].split(",")
    cells[1 + NUMERIC_FIELDS.index("per")] = "1.3"
    lines[2] = ",".join(cells)
    with pytest.raises(TraceFormatError) as info:
        ingest_trace("\n".join(lines))
    (lineno, msg), = info.value.errors
    assert lineno == 3
    assert "per" in msg


def test_ingest_reports_missing_column_and_non_monotone_time():
    with pytest.raises(TraceFormatError, match="missing column"):
        ingest_trace("timestamp_ms,snr_db\n0,1\n")
    buf = io.StringIO()
    xs = synth_trace(TraceConfig(duration_s=0.2))
    write_trace([xs[1], xs[0]], buf)
    with pytest.raises(TraceFormatError, match="not after"):
        ingest_trace(buf.getvalue())


def test_trace_round_trip_is_exact():
    xs = synth_trace(TraceConfig(duration_s=3.0, rng_seed=11))
    buf = io.StringIO()
    write_trace(xs, buf)
    assert ingest_trace(buf.getvalue().encode()) == xs


def test_perturb_zero_is_identity():
    x = ctx()
    assert perturb_context(x, 0.0, seed=1) == x


def test_perturb_scan_respects_magnitude():
    x = ctx(per=0.98, cpu_load=1.0, snr_db=-5.0)
    for seed in range(1000):
        y = perturb_context(x, 0.1, seed)
        assert normalized_distance(x, y) <= 0.1 + 1e-12
        assert y.urgency is x.urgency


contexts = st.builds(
    ctx,
    snr_db=st.floats(-5, 35), per=st.floats(0, 1), cpu_load=st.floats(0, 1),
    speed_mps=st.floats(0, 50), connectivity_horizon_s=st.floats(0.5, 30),
    urgency=st.sampled_from(list(Urgency)),
)


@settings(max_examples=200, deadline=None)
@given(x=contexts, m=st.floats(0, 0.5), seed=st.integers(0, 10**6))
def test_perturbation_containment(x, m, seed):
    y = perturb_context(x, m, seed)
    assert normalized_distance(x, y) <= m + 1e-12
    assert y.urgency is x.urgency


@settings(max_examples=100, deadline=None)
@given(x=contexts, m=st.floats(0, 1))
def test_degrade_moves_channel_and_load_the_wrong_way(x, m):
    y = degrade_context(x, m)
    assert y.snr_db <= x.snr_db and y.per >= x.per and y.cpu_load >= x.cpu_load
    assert normalized_distance(x, y) <= m + 1e-12


def test_context_hash_determinism_and_sensitivity():
    x = ctx()
    assert context_hash(x) == context_hash(ctx())
    assert context_hash(x) != context_hash(ctx(snr_db=12.01))
    assert len(context_hash(x)) == DIGEST_SIZE


@settings(max_examples=100, deadline=None)
@given(x=contexts)
def test_digest_length_is_fixed(x):
    assert len(context_hash(x)) == DIGEST_SIZE == 32


def test_canonical_encoding_matches_documented_layout():
    x = ctx(timestamp_ms=1234)
    expected = struct.pack(">q", 1200)
    for f in NUMERIC_FIELDS:
        expected += struct.pack(">q", round(getattr(x, f) * 10_000))
    expected += bytes([1])  # control
    assert canonical_bytes(x, bucket_ms=100) == expected
    assert context_hash(x, 100) == hashlib.sha256(expected).digest()


def test_bucketing_absorbs_sampling_jitter_within_interval():
    assert context_hash(ctx(timestamp_ms=1210), 100) == context_hash(ctx(timestamp_ms=1290), 100)
    assert context_hash(ctx(timestamp_ms=1290), 100) != context_hash(ctx(timestamp_ms=1300), 100)


def test_field_ranges_cover_every_numeric_field():
    assert set(FIELD_RANGES) == set(NUMERIC_FIELDS)
