"""Bidirectional flow assembly and flow-feature extraction.

Packets are folded into flows keyed by the canonical 5-tuple; the forward
direction is whatever direction the first packet of a flow travelled.
All timestamps are integer microseconds.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import DataError, FlowOrderError

SCHEMA_VERSION = "ddx-flow-schema/1"

FLAG_LETTERS = {"F": "FIN", "S": "SYN", "R": "RST", "P": "PSH", "A": "ACK", "U": "URG", "C": "CWE", "E": "ECE"}
FLAG_NAMES = frozenset(FLAG_LETTERS.values())
_LETTER_OF = {v: k for k, v in FLAG_LETTERS.items()}

FWD = "fwd"
BWD = "bwd"

TCP = 6
UDP = 17


@dataclass(frozen=True, slots=True)
class PacketRecord:
    ts_us: int
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    proto: int
    total_len: int
    hdr_len: int
    payload_len: int
    tcp_flags: frozenset = frozenset()
    tcp_window: Optional[int] = None
    label: Optional[str] = None

    def __post_init__(self):
        if self.proto not in (TCP, UDP):
            raise DataError(f"unsupported proto {self.proto}")
        for port in (self.src_port, self.dst_port):
            if not 0 <= port <= 65535:
                raise DataError(f"port {port} out of range")
        if min(self.total_len, self.hdr_len, self.payload_len) < 0:
            raise DataError("negative length")
        if self.hdr_len + self.payload_len > self.total_len:
            raise DataError(
                f"hdr_len + payload_len = {self.hdr_len + self.payload_len} exceeds total_len {self.total_len}"
            )
        if not self.tcp_flags <= FLAG_NAMES:
            raise DataError(f"unknown TCP flags {sorted(self.tcp_flags - FLAG_NAMES)}")
        if self.proto != TCP and self.tcp_flags:
            raise DataError("TCP flags on a non-TCP packet")
        if self.tcp_window is not None and self.tcp_window < 0:
            raise DataError("negative tcp_window")


@dataclass(frozen=True)
class FlowKey:
    """Canonical conversation key; equal for both directions.

    ``forward_is_low`` records the orientation (whether the flow initiator is
    the lexicographically lower endpoint) and does not take part in equality.
    """

    low: tuple
    high: tuple
    proto: int
    forward_is_low: bool = field(default=True, compare=False)

    @classmethod
    def of(cls, p: PacketRecord) -> "FlowKey":
        a = (p.src_ip, p.src_port)
        b = (p.dst_ip, p.dst_port)
        if a <= b:
            return cls(a, b, p.proto, True)
        return cls(b, a, p.proto, False)

    @property
    def initiator(self) -> tuple:
        return self.low if self.forward_is_low else self.high


@dataclass(frozen=True)
class RawFlow:
    key: FlowKey
    packets: tuple  # of (PacketRecord, FWD | BWD)
    label: Optional[str] = None

    def __post_init__(self):
        if not self.packets:
            raise DataError("flow without packets")


@dataclass(frozen=True)
class FlowAssemblyConfig:
    idle_timeout_us: int = 120_000_000
    active_timeout_us: int = 3_600_000_000
    activity_gap_us: int = 1_000_000
    bulk_min_packets: int = 4
    bulk_gap_us: int = 1_000_000

    def __post_init__(self):
        for name in ("idle_timeout_us", "active_timeout_us", "activity_gap_us", "bulk_min_packets", "bulk_gap_us"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive")
        if self.idle_timeout_us > self.active_timeout_us:
            raise DataError("idle_timeout_us must not exceed active_timeout_us")


# --------------------------------------------------------------------------- schema


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    unit: str
    group: str


GROUPS = ("duration", "length", "throughput", "iat", "flags", "header", "bulk", "subflow", "window", "activity", "ratio")


def _stat_names(prefix, stats):
    return [f"{prefix}_{s}" for s in stats]


def _build_schema():
    us, b, n, ps = "us", "bytes", "count", "1/s"
    spec = [("flow_duration", us, "duration")]
    spec += [("fwd_pkt_cnt", n, "length"), ("bwd_pkt_cnt", n, "length")]
    for d in ("fwd", "bwd"):
        spec += [(name, b, "length") for name in _stat_names(f"{d}_pkt_len", ("tot", "max", "min", "mean", "std"))]
    spec += [("bytes_per_s", "bytes/s", "throughput"), ("pkt_per_s", ps, "throughput"),
             ("fwd_pkt_per_s", ps, "throughput"), ("bwd_pkt_per_s", ps, "throughput")]
    spec += [(name, us, "iat") for name in _stat_names("iat", ("mean", "std", "max", "min"))]
    for d in ("fwd", "bwd"):
        spec += [(name, us, "iat") for name in _stat_names(f"{d}_iat", ("tot", "mean", "std", "max", "min"))]
    spec += [(f"{d}_flag_{f}", n, "flags") for f in ("psh", "urg") for d in ("fwd", "bwd")]
    for d in ("fwd", "bwd"):
        spec += [(name, b, "header") for name in _stat_names(f"{d}_pkt_hdr_len", ("tot", "min"))]
    spec += [(name, b, "length") for name in _stat_names("pkt_len", ("max", "min", "mean", "std"))]
    spec += [("pkt_len_var", "bytes^2", "length")]
    spec += [(f"flag_{f}", n, "flags") for f in ("fin", "syn", "rst", "psh", "ack", "urg", "cwr", "ece")]
    spec += [("down_up_ratio", "ratio", "ratio")]
    spec += [("pkt_size_avg", b, "length"), ("fwd_seg_size_avg", b, "header"), ("bwd_seg_size_avg", b, "header")]
    spec += [("fwd_non_empty_pkt_cnt", n, "length"), ("bwd_non_empty_pkt_cnt", n, "length")]
    for d in ("fwd", "bwd"):
        spec += [(f"{d}_bulk_bytes_mean", b, "bulk"), (f"{d}_bulk_pkt_mean", n, "bulk"),
                 (f"{d}_bulk_rate_mean", "bytes/s", "bulk")]
    for d in ("fwd", "bwd"):
        spec += [(f"{d}_subflow_pkt_mean", n, "subflow"), (f"{d}_subflow_bytes_mean", b, "subflow")]
    spec += [("fwd_tcp_init_win_bytes", b, "window"), ("bwd_tcp_init_win_bytes", b, "window")]
    spec += [(name, us, "activity") for name in _stat_names("active", ("min", "max", "mean", "std"))]
    spec += [(name, us, "activity") for name in _stat_names("idle", ("min", "max", "mean", "std"))]
    return tuple(FeatureSpec(*s) for s in spec)


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple
    version: str = SCHEMA_VERSION

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise DataError("duplicate feature names in schema")
        object.__setattr__(self, "_index", {name.lower(): i for i, name in enumerate(names)})

    @property
    def names(self) -> tuple:
        return tuple(f.name for f in self.features)

    def __len__(self):
        return len(self.features)

    def __contains__(self, name):
        return name.lower() in self._index

    def index(self, name: str) -> int:
        """Position of ``name``; lookup ignores case (``flag_SYN`` == ``flag_syn``)."""
        try:
            return self._index[name.lower()]
        except KeyError:
            raise KeyError(name) from None

    def get(self, name: str) -> Optional[FeatureSpec]:
        i = self._index.get(name.lower())
        return None if i is None else self.features[i]

    def fingerprint(self) -> str:
        return names_fingerprint(self.names)


def names_fingerprint(names: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(names).encode()).hexdigest()[:16]


_SCHEMA = FeatureSchema(_build_schema())


def feature_schema() -> FeatureSchema:
    return _SCHEMA


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    label: Optional[str] = None


# --------------------------------------------------------------------------- assembly


class _OpenFlow:
    __slots__ = ("key", "seq", "start", "last", "packets", "label", "fin_fwd", "fin_bwd")

    def __init__(self, key, seq, p):
        self.key = key
        self.seq = seq
        self.start = p.ts_us
        self.last = p.ts_us
        self.packets = []
        self.label = None
        self.fin_fwd = False
        self.fin_bwd = False

    def add(self, p):
        direction = FWD if (p.src_ip, p.src_port) == self.key.initiator else BWD
        self.packets.append((p, direction))
        self.last = p.ts_us
        if self.label is None and p.label is not None:
            self.label = p.label
        if "FIN" in p.tcp_flags:
            if direction == FWD:
                self.fin_fwd = True
            else:
                self.fin_bwd = True
        return "RST" in p.tcp_flags or (self.fin_fwd and self.fin_bwd)

    def close(self):
        return RawFlow(self.key, tuple(self.packets), self.label)


def assemble_flows(packets: Iterable[PacketRecord], cfg: FlowAssemblyConfig = FlowAssemblyConfig()) -> list:
    """Group a time-sorted packet stream into flows.

    A flow ends on an idle gap above ``idle_timeout_us``, a lifetime above
    ``active_timeout_us``, RST from either side, or FIN seen in both
    directions. Flows are returned in order of their first packet.
    """
    open_flows = {}
    done = []
    seq = 0
    prev_ts = None
    for i, p in enumerate(packets):
        if prev_ts is not None and p.ts_us < prev_ts:
            raise FlowOrderError(i, prev_ts, p.ts_us)
        prev_ts = p.ts_us
        key = FlowKey.of(p)
        st = open_flows.get(key)
        if st is not None and (p.ts_us - st.last > cfg.idle_timeout_us or p.ts_us - st.start > cfg.active_timeout_us):
            done.append((st.seq, st.close()))
            st = None
        if st is None:
            st = _OpenFlow(key, seq, p)
            seq += 1
            open_flows[key] = st
        if st.add(p):
            done.append((st.seq, st.close()))
            del open_flows[key]
    done.extend((st.seq, st.close()) for st in open_flows.values())
    done.sort(key=lambda t: t[0])
    return [f for _, f in done]


# --------------------------------------------------------------------------- features


def _stats(a):
    """(tot, mean, std, max, min) with zeros for an empty array; population std."""
    if a.size == 0:
        return 0.0, 0.0, 0.0, 0.0, 0.0
    a = a.astype(np.float64)
    return float(a.sum()), float(a.mean()), float(a.std()), float(a.max()), float(a.min())


def _rate(count, duration_us):
    return count / (max(duration_us, 1) / 1e6)


def segment_subflows(ts: np.ndarray, gap_us: int) -> list:
    """Split a sorted timestamp array at gaps above ``gap_us``; returns (start, stop) index pairs."""
    if ts.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(ts) > gap_us) + 1
    bounds = [0, *cuts.tolist(), ts.size]
    return list(zip(bounds[:-1], bounds[1:]))


def find_bulks(ts, fwd, payload, min_packets, gap_us):
    """Maximal runs of consecutive same-direction packets carrying payload.

    Returns a list of (is_fwd, n_packets, payload_bytes, duration_us).
    """
    bulks = []
    run = None  # [is_fwd, count, bytes, start, last]
    for t, d, pl in zip(ts.tolist(), fwd.tolist(), payload.tolist()):
        if pl > 0 and run is not None and run[0] == d and t - run[4] <= gap_us:
            run[1] += 1
            run[2] += pl
            run[4] = t
            continue
        if run is not None and run[1] >= min_packets:
            bulks.append((run[0], run[1], run[2], run[4] - run[3]))
        run = [d, 1, pl, t, t] if pl > 0 else None
    if run is not None and run[1] >= min_packets:
        bulks.append((run[0], run[1], run[2], run[4] - run[3]))
    return bulks


def compute_features(flow: RawFlow, cfg: FlowAssemblyConfig = FlowAssemblyConfig()) -> FeatureVector:
    recs = [p for p, _ in flow.packets]
    ts = np.array([p.ts_us for p in recs], dtype=np.int64)
    lens = np.array([p.total_len for p in recs], dtype=np.int64)
    hdr = np.array([p.hdr_len for p in recs], dtype=np.int64)
    payload = np.array([p.payload_len for p in recs], dtype=np.int64)
    fwd = np.array([d == FWD for _, d in flow.packets], dtype=bool)
    bwd = ~fwd
    flags = [p.tcp_flags for p in recs]

    f = {}
    duration = int(ts[-1] - ts[0])
    f["flow_duration"] = float(duration)
    n_fwd, n_bwd = int(fwd.sum()), int(bwd.sum())
    f["fwd_pkt_cnt"], f["bwd_pkt_cnt"] = float(n_fwd), float(n_bwd)
    for d, mask in (("fwd", fwd), ("bwd", bwd)):
        tot, mean, std, mx, mn = _stats(lens[mask])
        f.update({f"{d}_pkt_len_tot": tot, f"{d}_pkt_len_max": mx, f"{d}_pkt_len_min": mn,
                  f"{d}_pkt_len_mean": mean, f"{d}_pkt_len_std": std})

    f["bytes_per_s"] = _rate(float(lens.sum()), duration)
    f["pkt_per_s"] = _rate(len(recs), duration)
    f["fwd_pkt_per_s"] = _rate(n_fwd, duration)
    f["bwd_pkt_per_s"] = _rate(n_bwd, duration)

    _, mean, std, mx, mn = _stats(np.diff(ts))
    f.update({"iat_mean": mean, "iat_std": std, "iat_max": mx, "iat_min": mn})
    for d, mask in (("fwd", fwd), ("bwd", bwd)):
        tot, mean, std, mx, mn = _stats(np.diff(ts[mask]))
        f.update({f"{d}_iat_tot": tot, f"{d}_iat_mean": mean, f"{d}_iat_std": std,
                  f"{d}_iat_max": mx, f"{d}_iat_min": mn})

    for flag, name in (("PSH", "psh"), ("URG", "urg")):
        f[f"fwd_flag_{name}"] = float(sum(flag in fl for fl, is_fwd in zip(flags, fwd) if is_fwd))
        f[f"bwd_flag_{name}"] = float(sum(flag in fl for fl, is_fwd in zip(flags, fwd) if not is_fwd))

    for d, mask in (("fwd", fwd), ("bwd", bwd)):
        tot, _, _, _, mn = _stats(hdr[mask])
        f.update({f"{d}_pkt_hdr_len_tot": tot, f"{d}_pkt_hdr_len_min": mn})

    tot, mean, std, mx, mn = _stats(lens)
    f.update({"pkt_len_max": mx, "pkt_len_min": mn, "pkt_len_mean": mean, "pkt_len_std": std})
    f["pkt_len_var"] = float(lens.astype(np.float64).var())

    for flag, name in (("FIN", "fin"), ("SYN", "syn"), ("RST", "rst"), ("PSH", "psh"),
                       ("ACK", "ack"), ("URG", "urg"), ("CWE", "cwr"), ("ECE", "ece")):
        f[f"flag_{name}"] = float(sum(flag in fl for fl in flags))

    f["down_up_ratio"] = n_bwd / n_fwd if n_fwd else 0.0
    f["pkt_size_avg"] = tot / len(recs)
    f["fwd_seg_size_avg"] = _stats(payload[fwd])[1]
    f["bwd_seg_size_avg"] = _stats(payload[bwd])[1]
    f["fwd_non_empty_pkt_cnt"] = float((payload[fwd] > 0).sum())
    f["bwd_non_empty_pkt_cnt"] = float((payload[bwd] > 0).sum())

    bulks = find_bulks(ts, fwd, payload, cfg.bulk_min_packets, cfg.bulk_gap_us)
    for d, is_fwd in (("fwd", True), ("bwd", False)):
        mine = [bk for bk in bulks if bk[0] == is_fwd]
        if mine:
            f[f"{d}_bulk_bytes_mean"] = float(np.mean([bk[2] for bk in mine]))
            f[f"{d}_bulk_pkt_mean"] = float(np.mean([bk[1] for bk in mine]))
            f[f"{d}_bulk_rate_mean"] = float(np.mean([_rate(bk[2], bk[3]) for bk in mine]))
        else:
            f[f"{d}_bulk_bytes_mean"] = f[f"{d}_bulk_pkt_mean"] = f[f"{d}_bulk_rate_mean"] = 0.0

    segments = segment_subflows(ts, cfg.activity_gap_us)
    n_sub = len(segments)
    f["fwd_subflow_pkt_mean"] = n_fwd / n_sub
    f["fwd_subflow_bytes_mean"] = f["fwd_pkt_len_tot"] / n_sub
    f["bwd_subflow_pkt_mean"] = n_bwd / n_sub
    f["bwd_subflow_bytes_mean"] = f["bwd_pkt_len_tot"] / n_sub

    for d, want_fwd in (("fwd", True), ("bwd", False)):
        win = next((p.tcp_window for p, is_fwd in zip(recs, fwd)
                    if is_fwd == want_fwd and p.proto == TCP and p.tcp_window is not None), 0)
        f[f"{d}_tcp_init_win_bytes"] = float(win)

    active = np.array([ts[stop - 1] - ts[start] for start, stop in segments], dtype=np.int64)
    gaps = np.diff(ts)
    idle = gaps[gaps > cfg.activity_gap_us]
    for name, arr in (("active", active), ("idle", idle)):
        _, mean, std, mx, mn = _stats(arr)
        f.update({f"{name}_min": mn, f"{name}_max": mx, f"{name}_mean": mean, f"{name}_std": std})

    values = np.array([f[name] for name in _SCHEMA.names], dtype=np.float64)
    return FeatureVector(values, flow.label)


# --------------------------------------------------------------------------- I/O


def flags_to_str(flags: frozenset) -> str:
    return "".join(letter for letter, name in FLAG_LETTERS.items() if name in flags)


def packet_to_json(p: PacketRecord) -> str:
    obj = {
        "ts": p.ts_us / 1e6,
        "src_ip": p.src_ip,
        "dst_ip": p.dst_ip,
        "src_port": p.src_port,
        "dst_port": p.dst_port,
        "proto": p.proto,
        "len": p.total_len,
        "hdr_len": p.hdr_len,
        "payload_len": p.payload_len,
        "flags": flags_to_str(p.tcp_flags),
    }
    if p.tcp_window is not None:
        obj["win"] = p.tcp_window
    if p.label is not None:
        obj["label"] = p.label
    return json.dumps(obj, separators=(",", ":"))


def packet_from_json(line: str, lineno: int = 0) -> PacketRecord:
    try:
        obj = json.loads(line)
        letters = obj.get("flags", "") or ""
        unknown = set(letters) - set(FLAG_LETTERS)
        if unknown:
            raise DataError(f"unknown flag letters {sorted(unknown)}")
        return PacketRecord(
            ts_us=int(round(float(obj["ts"]) * 1e6)),
            src_ip=str(obj["src_ip"]),
            dst_ip=str(obj["dst_ip"]),
            src_port=int(obj["src_port"]),
            dst_port=int(obj["dst_port"]),
            proto=int(obj["proto"]),
            total_len=int(obj["len"]),
            hdr_len=int(obj["hdr_len"]),
            payload_len=int(obj["payload_len"]),
            tcp_flags=frozenset(FLAG_LETTERS[c] for c in letters),
            tcp_window=None if obj.get("win") is None else int(obj["win"]),
            label=obj.get("label"),
        )
    except DataError as exc:
        raise DataError(f"line {lineno}: {exc}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"line {lineno}: malformed packet record ({exc})") from None


def write_packets_jsonl(packets: Iterable[PacketRecord], fh: IO[str]) -> int:
    n = 0
    for p in packets:
        fh.write(packet_to_json(p))
        fh.write("\n")
        n += 1
    return n


def read_packets_jsonl(fh: IO[str]) -> Iterator[PacketRecord]:
    for lineno, line in enumerate(fh, 1):
        if line.strip():
            yield packet_from_json(line, lineno)


def _fmt(v: float) -> str:
    r = repr(float(v))
    return r[:-2] if r.endswith(".0") else r


def write_flows_csv(vectors: Iterable[FeatureVector], fh: IO[str], schema: FeatureSchema = _SCHEMA) -> int:
    """Flow CSV: schema names plus ``label``; LF line endings."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow([*schema.names, "label"])
    n = 0
    for vec in vectors:
        w.writerow([*(_fmt(v) for v in vec.values), "" if vec.label is None else vec.label])
        n += 1
    return n


def flows_to_csv_text(vectors: Iterable[FeatureVector]) -> str:
    buf = io.StringIO()
    write_flows_csv(vectors, buf)
    return buf.getvalue()
