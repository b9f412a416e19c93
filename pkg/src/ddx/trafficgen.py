"""Seeded synthetic packet streams with benign and slowloris-like DoS flows.

Each flow draws from its own RNG substream keyed on (seed, kind, flow index),
so adding flows never changes the ones already generated.

Benign flows are request/response conversations: varied header sizes,
responses spread over 60-1500 bytes, clients ACKing data, think times
between exchanges. DoS flows open a connection, send a partial request and
then a burst of tiny header fragments with a constant minimal header, to
which the server answers with near-constant small packets.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError
from .flowmeter import TCP, PacketRecord

KINDS = {"benign": 0, "dos_slowloris_like": 1}
LABELS = {"benign": "benign", "dos_slowloris_like": "dos_slowloris"}

BASE_TS_US = 1_500_000_000_000_000
FLOW_SPACING_US = 150_000

DEFAULTS = {
    "benign": {
        "bwd_len": (60, 1500),
        "req_len": (80, 600),
        "fwd_hdr_choices": (20, 32, 40, 52, 60),
        "bwd_hdr_choices": (20, 32, 40),
        "exchanges": (1, 20),
        "resp_pkts": (1, 12),
        "think_iat_mean_us": 300_000.0,
        "pkt_iat_mean_us": 2_000.0,
        "ack_every_prob": 0.6,
        "bulk_flow_prob": 0.35,
        "mss_len": (1448, 1500),
        "midstream_prob": 0.25,
        "fin_prob": 0.85,
        "win_choices": (8192, 14600, 29200, 64240, 65535),
    },
    "dos_slowloris_like": {
        "bwd_len_base": 60,
        "bwd_len_jitter": 2,
        "bwd_hdr_choices": (20, 32, 40),
        "min_hdr": 20,
        "keepalives": (15, 50),
        "keepalive_payload": (5, 300),
        "req_len": (200, 450),
        "fwd_iat_mean_us": 2_000.0,
        "psh_prob": 0.3,
        "response_prob": 0.8,
        "big_response_prob": 0.5,
        "big_response_len": (200, 1500),
        "fin_prob": 0.3,
        "rst_prob": 0.2,
        "win_choices": (8192, 14600, 29200, 64240, 65535),
    },
}


@dataclass(frozen=True)
class TrafficProfile:
    kind: str
    n_flows: int
    seed: int
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown traffic kind {self.kind!r}")
        if self.n_flows < 1:
            raise ConfigError("n_flows must be >= 1")
        unknown = set(self.overrides) - set(DEFAULTS[self.kind])
        if unknown:
            raise ConfigError(f"unknown {self.kind} parameters: {sorted(unknown)}")
        _validate(self.params)

    @property
    def params(self) -> dict:
        return {**DEFAULTS[self.kind], **self.overrides}

    @property
    def label(self) -> str:
        return LABELS[self.kind]


def _validate(params):
    for name, value in params.items():
        if name.endswith("_mean_us"):
            if not (np.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be finite and positive")
        elif name.endswith("_prob"):
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        elif name.endswith("_choices"):
            if not value or min(value) < 0:
                raise ConfigError(f"{name} must be a non-empty list of non-negative values")
        elif isinstance(value, (tuple, list)):
            lo, hi = value
            if lo > hi or lo < 0:
                raise ConfigError(f"{name} must be a range lo <= hi with lo >= 0")
    if "min_hdr" in params:
        lo, _ = params["keepalive_payload"]
        if params["min_hdr"] <= 0:
            raise ConfigError("min_hdr must be positive")
        if params["req_len"][0] < params["min_hdr"] + 1 or lo < 1:
            raise ConfigError("dos request and keep-alive packets must carry payload")
        if params["bwd_len_base"] < max(params["bwd_hdr_choices"]):
            raise ConfigError("bwd_len_base must cover the largest backward header")
    if "bwd_len" in params:
        if params["bwd_len"][0] < max(params["bwd_hdr_choices"]):
            raise ConfigError("bwd_len lower bound must cover the largest backward header")
        if params["req_len"][0] <= max(params["fwd_hdr_choices"]):
            raise ConfigError("req_len lower bound must exceed the largest forward header")


class _FlowWriter:
    def __init__(self, client, server, start_us, label):
        self.client = client
        self.server = server
        self.t = start_us
        self.label = label
        self.packets = []

    def emit(self, fwd, gap_us, length, hdr, flags=(), win=None):
        self.t += max(1, int(gap_us))
        src, dst = (self.client, self.server) if fwd else (self.server, self.client)
        self.packets.append(PacketRecord(
            ts_us=self.t, src_ip=src[0], dst_ip=dst[0], src_port=src[1], dst_port=dst[1], proto=TCP,
            total_len=int(length), hdr_len=int(hdr), payload_len=int(length - hdr),
            tcp_flags=frozenset(flags), tcp_window=win, label=self.label,
        ))


def _uniform(rng, bounds):
    return int(rng.integers(bounds[0], bounds[1], endpoint=True))


def _benign_flow(rng, w, p):
    fwd_hdrs = p["fwd_hdr_choices"]
    bwd_hdrs = p["bwd_hdr_choices"]
    fhdr = lambda: int(rng.choice(fwd_hdrs))
    bhdr = lambda: int(rng.choice(bwd_hdrs))
    iat = lambda: rng.exponential(p["pkt_iat_mean_us"])

    bulk = rng.random() < p["bulk_flow_prob"]
    # flows already in progress when capture starts carry no handshake
    if rng.random() >= p["midstream_prob"]:
        h = fhdr()
        w.emit(True, 0, h, h, {"SYN"}, win=int(rng.choice(p["win_choices"])))
        h = bhdr()
        w.emit(False, iat(), h, h, {"SYN", "ACK"}, win=int(rng.choice(p["win_choices"])))
    for k in range(_uniform(rng, p["exchanges"])):
        gap = iat() if k == 0 else rng.exponential(p["think_iat_mean_us"])
        w.emit(True, gap, _uniform(rng, p["req_len"]), fhdr(), {"ACK", "PSH"})
        n_resp = _uniform(rng, p["resp_pkts"])
        for r in range(n_resp):
            # bulk transfers fill full segments except for the tail of each response
            size = _uniform(rng, p["mss_len"] if bulk and r < n_resp - 1 else p["bwd_len"])
            w.emit(False, iat(), size, bhdr(), {"ACK"})
            # delayed ACKs: the client may acknowledge several segments at once
            if r == n_resp - 1 or rng.random() < p["ack_every_prob"]:
                h = fhdr()
                w.emit(True, iat(), h, h, {"ACK"})
    if rng.random() < p["fin_prob"]:
        h = fhdr()
        w.emit(True, rng.exponential(p["think_iat_mean_us"]), h, h, {"FIN", "ACK"})
        h = bhdr()
        w.emit(False, iat(), h, h, {"FIN", "ACK"})


def _dos_flow(rng, w, p):
    mh = p["min_hdr"]
    bhdr = lambda: int(rng.choice(p["bwd_hdr_choices"]))
    iat = lambda: rng.exponential(p["fwd_iat_mean_us"])
    small = lambda: p["bwd_len_base"] + int(rng.integers(0, p["bwd_len_jitter"], endpoint=True))
    win = int(rng.choice(p["win_choices"]))

    w.emit(True, 0, mh, mh, {"SYN"}, win=win)
    w.emit(False, iat(), small(), bhdr(), {"SYN", "ACK"}, win=int(rng.choice(p["win_choices"])))
    w.emit(True, iat(), _uniform(rng, p["req_len"]), mh, {"ACK", "PSH"})
    w.emit(False, iat(), small(), bhdr(), {"ACK"})
    n = _uniform(rng, p["keepalives"])
    big_at = int(rng.integers(0, n)) if rng.random() < p["big_response_prob"] else -1
    for k in range(n):
        flags = {"ACK", "PSH"} if rng.random() < p["psh_prob"] else {"ACK"}
        w.emit(True, iat(), mh + _uniform(rng, p["keepalive_payload"]), mh, flags)
        if k == big_at:
            w.emit(False, iat(), _uniform(rng, p["big_response_len"]), bhdr(), {"ACK"})
        elif rng.random() < p["response_prob"]:
            w.emit(False, iat(), small(), bhdr(), {"ACK"})
    u = rng.random()
    if u < p["fin_prob"]:
        w.emit(True, iat(), mh, mh, {"FIN", "ACK"})
        h = bhdr()
        w.emit(False, iat(), h, h, {"FIN", "ACK"})
    elif u < p["fin_prob"] + p["rst_prob"]:
        w.emit(True, iat(), mh, mh, {"RST"})


def flow_packets(profile: TrafficProfile, index: int) -> list:
    """Packets of flow ``index`` of ``profile`` (independent of other flows)."""
    kind_id = KINDS[profile.kind]
    rng = np.random.default_rng([profile.seed & 0xFFFFFFFFFFFFFFFF, kind_id, index])
    client = (f"10.{kind_id}.{(index >> 8) & 0xFF}.{index & 0xFF}", 1024 + (index * 7919) % 64000)
    server = (f"192.168.{10 + kind_id}.{1 + (index % 4)}", 80)
    start = BASE_TS_US + index * FLOW_SPACING_US + int(rng.integers(0, FLOW_SPACING_US))
    w = _FlowWriter(client, server, start, profile.label)
    if profile.kind == "benign":
        _benign_flow(rng, w, profile.params)
    else:
        _dos_flow(rng, w, profile.params)
    return w.packets


def generate(profile: TrafficProfile) -> list:
    """Time-sorted labeled packet stream for one profile."""
    return generate_mixed([profile])


def generate_mixed(profiles) -> list:
    tagged = []
    for profile in profiles:
        kind_id = KINDS[profile.kind]
        for i in range(profile.n_flows):
            for j, p in enumerate(flow_packets(profile, i)):
                tagged.append((p.ts_us, kind_id, i, j, p))
    tagged.sort(key=lambda t: t[:4])
    return [t[4] for t in tagged]


def synthetic_packets(n_benign: int = 500, n_dos: int = 500, seed: int = 7,
                      overrides: Optional[dict] = None) -> list:
    """The standard benign-vs-DoS experiment stream."""
    overrides = overrides or {}
    profiles = []
    if n_benign:
        profiles.append(TrafficProfile("benign", n_benign, seed, overrides.get("benign", {})))
    if n_dos:
        profiles.append(TrafficProfile("dos_slowloris_like", n_dos, seed, overrides.get("dos_slowloris_like", {})))
    return generate_mixed(profiles)
