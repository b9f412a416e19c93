import numpy as np
import pytest

from ddx.flowmeter import TCP, PacketRecord

FLAGS = {"F": "FIN", "S": "SYN", "R": "RST", "P": "PSH", "A": "ACK", "U": "URG", "C": "CWE", "E": "ECE"}


def pkt(ts, fwd=True, length=60, hdr=40, payload=None, flags="", win=None, a=("10.0.0.1", 1234),
        b=("10.0.0.2", 80), proto=TCP, label=None):
    src, dst = (a, b) if fwd else (b, a)
    if payload is None:
        payload = length - hdr
    return PacketRecord(
        ts_us=ts, src_ip=src[0], dst_ip=dst[0], src_port=src[1], dst_port=dst[1], proto=proto,
        total_len=length, hdr_len=hdr, payload_len=payload,
        tcp_flags=frozenset(FLAGS[c] for c in flags), tcp_window=win, label=label,
    )


@pytest.fixture
def make_pkt():
    return pkt


@pytest.fixture(scope="session")
def synthetic_dataset():
    """1000 generated flows (500 benign, 500 dos), seed 7."""
    from ddx.dataset import dataset_from_packets
    from ddx.trafficgen import synthetic_packets

    return dataset_from_packets(synthetic_packets(500, 500, seed=7))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    if 10 not in mod.RESULTS:
        terminalreporter.write_line("criterion 10: SKIPPED - no DDX_DATASET given")
