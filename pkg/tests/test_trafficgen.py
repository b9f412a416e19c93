import io

import numpy as np
import pytest

from ddx.dataset import dataset_from_packets
from ddx.errors import ConfigError
from ddx.flowmeter import BWD, FWD, assemble_flows, compute_features, feature_schema, write_packets_jsonl
from ddx.trafficgen import TrafficProfile, flow_packets, generate, synthetic_packets

NAMES = feature_schema().names


def jsonl(packets):
    buf = io.StringIO()
    write_packets_jsonl(packets, buf)
    return buf.getvalue().encode()


def test_same_seed_byte_identical():
    prof = TrafficProfile("dos_slowloris_like", 20, seed=3)
    assert jsonl(generate(prof)) == jsonl(generate(prof))


def test_different_seed_differs():
    a = generate(TrafficProfile("benign", 5, seed=1))
    b = generate(TrafficProfile("benign", 5, seed=2))
    assert jsonl(a) != jsonl(b)


def test_flow_substreams_stable_under_flow_count():
    small = TrafficProfile("benign", 3, seed=9)
    big = TrafficProfile("benign", 30, seed=9)
    for i in range(3):
        assert flow_packets(small, i) == flow_packets(big, i)


def test_stream_is_sorted_and_assembles_cleanly():
    packets = synthetic_packets(50, 50, seed=11)
    ts = [p.ts_us for p in packets]
    assert ts == sorted(ts)
    flows = assemble_flows(packets)
    assert len(flows) == 100
    assert sorted(f.label for f in flows) == ["benign"] * 50 + ["dos_slowloris"] * 50
    for f in flows:
        assert {p.label for p, _ in f.packets} == {f.label}


def test_backward_length_spread_dos_below_benign():
    packets = synthetic_packets(500, 500, seed=7)
    lengths = {"benign": [], "dos_slowloris": []}
    for flow in assemble_flows(packets):
        lengths[flow.label] += [p.total_len for p, d in flow.packets if d == BWD]
    assert np.std(lengths["dos_slowloris"], ddof=1) < np.std(lengths["benign"], ddof=1)


def test_dos_forward_header_min_is_configured_constant():
    prof = TrafficProfile("dos_slowloris_like", 40, seed=5, overrides={"min_hdr": 24})
    i = NAMES.index("fwd_pkt_hdr_len_min")
    for flow in assemble_flows(generate(prof)):
        assert compute_features(flow).values[i] == 24


def test_dos_backward_lengths_small_and_near_constant():
    prof = TrafficProfile("dos_slowloris_like", 30, seed=5, overrides={"big_response_prob": 0.0})
    for flow in assemble_flows(generate(prof)):
        bwd = [p.total_len for p, d in flow.packets if d == BWD and p.payload_len > 0]
        assert set(bwd) <= {60, 61, 62}


def test_labels_match_profile_for_all_flows():
    ds = dataset_from_packets(synthetic_packets(40, 60, seed=2))
    assert ds.class_names == ("benign", "dos_slowloris")
    assert ds.class_counts().tolist() == [40, 60]


@pytest.mark.parametrize(
    "kind, overrides",
    [
        ("benign", {"bwd_len": (900, 100)}),
        ("benign", {"pkt_iat_mean_us": 0.0}),
        ("benign", {"think_iat_mean_us": float("inf")}),
        ("dos_slowloris_like", {"fin_prob": 1.5}),
        ("dos_slowloris_like", {"no_such_param": 1}),
        ("dos_slowloris_like", {"min_hdr": 0}),
    ],
)
def test_invalid_parameters_rejected(kind, overrides):
    with pytest.raises(ConfigError):
        TrafficProfile(kind, 10, seed=1, overrides=overrides)


def test_invalid_kind_and_count():
    with pytest.raises(ConfigError):
        TrafficProfile("ddos_botnet", 10, seed=1)
    with pytest.raises(ConfigError):
        TrafficProfile("benign", 0, seed=1)


def test_generated_packets_satisfy_record_invariants():
    for p in synthetic_packets(20, 20, seed=4):
        assert p.hdr_len + p.payload_len <= p.total_len
        assert p.tcp_window is None or p.tcp_window >= 0
