"""Live packet-train probing over UDP with a TCP control channel.

The sender paces a short train of fixed-size datagrams at a nominal rate and
the receiver timestamps arrivals, returning them in a JSON summary line. One
probe sends several trains and reduces them to a single binary outcome: did
the train arrive at (close to) the rate it was sent at. Both ends bind the
same port number, TCP for control and UDP for data.

The receiver can rewrite arrival timestamps as if the train had crossed a
bottleneck of a given bandwidth, which makes loopback tests meaningful on a
host with no real constriction.
"""

from __future__ import annotations

import json
import selectors
import socket
import struct
import time
from dataclasses import dataclass, field

from pab.domain import Measurement, PathId
from pab.likelihood import rdt

# magic, train_id, seq, train_length, send_time_ns, flags
_HEADER = struct.Struct(">IIIIQI")
HEADER_SIZE = _HEADER.size
MAGIC = 0x50414221

REASSEMBLY_TIMEOUT = 0.2  # seconds of arrival silence before a train is closed
_MAX_DATAGRAM = 65507

# kernel receive timestamps: datagrams are stamped at enqueue, so a receiver
# that drains a burst late still sees true arrival spacing. Python does not
# export these constants; 35 is SO/SCM_TIMESTAMPNS on Linux.
_SO_TIMESTAMPNS = getattr(socket, "SO_TIMESTAMPNS", 35)
_SCM_TIMESTAMPNS = getattr(socket, "SCM_TIMESTAMPNS", _SO_TIMESTAMPNS)
_TIMESPEC = struct.Struct("ll")
_ANC_SPACE = 256


def _kernel_timestamp_ns(ancdata) -> int | None:
    for level, ctype, cdata in ancdata:
        if level == socket.SOL_SOCKET and ctype == _SCM_TIMESTAMPNS and len(cdata) >= _TIMESPEC.size:
            sec, nsec = _TIMESPEC.unpack_from(cdata)
            return sec * 1_000_000_000 + nsec
    return None


class BadPacket(ValueError):
    """Datagram too short or wrong magic."""


class MissingArrival(ValueError):
    """Arrival slots do not line up with the packets that were sent."""


class NoValidPackets(ValueError):
    """A train retained no usable receive gap."""


class ProbeTimeout(RuntimeError):
    """The receiver did not answer in time."""


class AllTrainsInvalid(RuntimeError):
    """Every train in a probe was discarded."""


def encode_packet(train_id: int, seq: int, train_length: int, t_ns: int, size: int, flags: int = 0) -> bytes:
    header = _HEADER.pack(MAGIC, train_id, seq, train_length, t_ns, flags)
    if size < HEADER_SIZE:
        raise ValueError(f"size {size} below header size {HEADER_SIZE}")
    return header + b"\x00" * (size - HEADER_SIZE)


def decode_packet(data: bytes) -> tuple[int, int, int, int, int]:
    """Return (train_id, seq, train_length, t_ns, flags)."""
    if len(data) < HEADER_SIZE:
        raise BadPacket(f"short datagram ({len(data)} bytes)")
    magic, train_id, seq, length, t_ns, flags = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadPacket(f"bad magic {magic:#x}")
    return train_id, seq, length, t_ns, flags


@dataclass(frozen=True)
class ProbeSpec:
    """One probe: rate in Mbps plus train geometry and timing tolerances."""

    rate: float
    trains: int = 3
    packets_per_train: int = 25
    packet_size: int = 1000
    validity_gap: float | None = None  # seconds; None means 3x the nominal gap
    inter_train_gap: float = 0.05

    def __post_init__(self) -> None:
        if not self.rate > 0:
            raise ValueError(f"rate must be positive, got {self.rate}")
        if self.trains < 1:
            raise ValueError("need at least one train")
        if self.packets_per_train < 2:
            raise ValueError("a train needs at least 2 packets to have a gap")
        if not HEADER_SIZE <= self.packet_size <= _MAX_DATAGRAM:
            raise ValueError(f"packet_size must be in [{HEADER_SIZE}, {_MAX_DATAGRAM}]")
        if self.validity_gap is not None and not self.validity_gap > 0:
            raise ValueError("validity_gap must be positive")
        if self.inter_train_gap < 0:
            raise ValueError("inter_train_gap must be non-negative")

    @property
    def nominal_gap(self) -> float:
        """Seconds between departures at the nominal rate."""
        return self.packet_size * 8 / (self.rate * 1e6)

    @property
    def tau(self) -> float:
        """Largest send gap a packet may sit behind and still count."""
        return self.validity_gap if self.validity_gap is not None else 3 * self.nominal_gap


def pace_train(spec: ProbeSpec) -> tuple[float, ...]:
    """Scheduled departure offsets in seconds from the train start."""
    return tuple(i * spec.nominal_gap for i in range(spec.packets_per_train))


@dataclass(frozen=True)
class TrainRecord:
    """Send/receive timestamps (ns) for one train; recv None where lost."""

    send_times: tuple[int, ...]
    recv_times: tuple[int | None, ...]
    valid_set: frozenset[int]

    @classmethod
    def build(cls, send_times, recv_times, tau_ns: int) -> "TrainRecord":
        """Mark each packet whose actual send gap stayed within tau.

        Index 0 has no defined gap and is never valid. A packet sent late,
        behind a distended gap, says nothing about the path and is dropped
        here rather than polluting the rate estimate.
        """
        if len(send_times) != len(recv_times):
            raise MissingArrival(
                f"{len(recv_times)} arrival slots for {len(send_times)} packets"
            )
        valid = frozenset(
            i
            for i in range(1, len(send_times))
            if send_times[i] - send_times[i - 1] <= tau_ns
        )
        return cls(tuple(send_times), tuple(recv_times), valid)


def egress_rate(record: TrainRecord, packet_size: int) -> float:
    """Receive-side rate in Mbps over the valid gaps with both arrivals seen."""
    total_ns = 0
    count = 0
    for i in sorted(record.valid_set):
        a = record.recv_times[i - 1]
        b = record.recv_times[i]
        if a is None or b is None:
            continue
        total_ns += b - a
        count += 1
    if count == 0:
        raise NoValidPackets("no valid receive gaps")
    if total_ns <= 0:
        raise NoValidPackets("non-positive receive span")
    return count * packet_size * 8 * 1e3 / total_ns


def lower_median(values) -> float:
    xs = sorted(values)
    if not xs:
        raise ValueError("no values")
    return xs[(len(xs) - 1) // 2]


@dataclass(frozen=True)
class ProbeResult:
    measurement: Measurement
    train_rates: tuple[float, ...]
    egress_mbps: float


def _pace_to(target_ns: int) -> None:
    # sleep for the bulk, spin the last stretch; sleep() alone overshoots
    while True:
        rem = target_ns - time.perf_counter_ns()
        if rem <= 0:
            return
        if rem > 200_000:
            time.sleep((rem - 100_000) / 1e9)


def _read_summary(ctrl: socket.socket, buf: bytearray, train_id: int, deadline: float) -> dict:
    while True:
        nl = buf.find(b"\n")
        if nl >= 0:
            line = bytes(buf[:nl])
            del buf[: nl + 1]
            if not line.strip():
                continue
            try:
                msg = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ProbeTimeout(f"garbled control line: {exc}") from None
            summary = msg.get("summary")
            if summary is not None and summary.get("train_id") == train_id:
                return summary
            continue
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise ProbeTimeout(f"no summary for train {train_id}")
        ctrl.settimeout(remaining)
        try:
            chunk = ctrl.recv(4096)
        except socket.timeout:
            raise ProbeTimeout(f"no summary for train {train_id}") from None
        if not chunk:
            raise ProbeTimeout("receiver closed the control connection")
        buf.extend(chunk)


def _run_train(
    ctrl: socket.socket,
    udp: socket.socket,
    spec: ProbeSpec,
    train_id: int,
    buf: bytearray,
) -> TrainRecord:
    n = spec.packets_per_train
    start = {"start": {"train_id": train_id, "length": n, "size": spec.packet_size}}
    ctrl.sendall((json.dumps(start) + "\n").encode())
    time.sleep(0.02)  # let the receiver register the train before data lands

    gap_ns = int(round(spec.nominal_gap * 1e9))
    send_times: list[int] = []
    t0 = time.perf_counter_ns()
    for i in range(n):
        _pace_to(t0 + i * gap_ns)
        now = time.perf_counter_ns()
        udp.send(encode_packet(train_id, i, n, now, spec.packet_size))
        send_times.append(now)

    deadline = time.monotonic() + spec.nominal_gap * n + 1.5
    summary = _read_summary(ctrl, buf, train_id, deadline)
    recv: list[int | None] = [None] * n
    for seq, t in summary.get("recv", ()):
        if 0 <= seq < n and recv[seq] is None:
            recv[seq] = int(t)
    return TrainRecord.build(send_times, recv, int(round(spec.tau * 1e9)))


def probe_once(
    host: str,
    port: int,
    spec: ProbeSpec,
    path: PathId = "p0",
    epsilon: float = 5.0,
) -> ProbeResult:
    """Send spec.trains trains and reduce them to one binary outcome.

    The probe's egress estimate is the lower median across trains, robust to
    a single train hitting cross-traffic or scheduler noise. Outcome is 1
    when egress keeps up with the nominal send rate to within epsilon.
    """
    try:
        ctrl = socket.create_connection((host, port), timeout=5.0)
    except OSError as exc:
        raise ProbeTimeout(f"cannot reach receiver {host}:{port}: {exc}") from None
    udp = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        udp.connect((host, port))
        buf = bytearray()
        rates: list[float] = []
        for k in range(spec.trains):
            record = _run_train(ctrl, udp, spec, k, buf)
            try:
                rates.append(egress_rate(record, spec.packet_size))
            except NoValidPackets:
                pass
            if k + 1 < spec.trains:
                time.sleep(spec.inter_train_gap)
    finally:
        udp.close()
        ctrl.close()
    if not rates:
        raise AllTrainsInvalid(f"all {spec.trains} trains discarded")
    egress = lower_median(rates)
    z = rdt(spec.rate, egress, epsilon)
    measurement = Measurement(path=path, rate=int(round(spec.rate)), outcome=z)
    return ProbeResult(measurement=measurement, train_rates=tuple(rates), egress_mbps=egress)


def measure(host: str, port: int, spec: ProbeSpec, path: PathId = "p0", epsilon: float = 5.0) -> Measurement:
    return probe_once(host, port, spec, path, epsilon).measurement


@dataclass(eq=False)
class _TrainState:
    train_id: int
    length: int | None = None
    size: int | None = None
    arrivals: dict[int, int] = field(default_factory=dict)
    last_activity: float = 0.0

    def complete(self, now: float) -> bool:
        if self.length is not None and self.arrivals and len(self.arrivals) >= self.length:
            return True
        return now - self.last_activity > REASSEMBLY_TIMEOUT

    def summary(self, shape_mbps: float | None) -> dict:
        seqs = sorted(self.arrivals)
        ts: list[int] = [self.arrivals[s] for s in seqs]
        if shape_mbps is not None and ts:
            # serialize arrivals through an emulated bottleneck
            gap_ns = (self.size or HEADER_SIZE) * 8 * 1e3 / shape_mbps
            shaped: list[int] = []
            prev = None
            for t in ts:
                cur = float(t) if prev is None else max(float(t), prev + gap_ns)
                shaped.append(int(round(cur)))
                prev = cur
            ts = shaped
        return {"summary": {"train_id": self.train_id, "recv": [[s, t] for s, t in zip(seqs, ts)]}}


def _bind_pair(host: str, port: int) -> tuple[socket.socket, socket.socket, int]:
    # TCP and UDP share the port number; with port=0 the ephemeral TCP pick
    # may be taken on UDP, so retry until a number is free on both
    last: OSError | None = None
    for _ in range(32):
        tcp = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        tcp.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            tcp.bind((host, port))
        except OSError:
            tcp.close()
            raise
        bound = tcp.getsockname()[1]
        udp = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            udp.bind((host, bound))
        except OSError as exc:
            last = exc
            udp.close()
            tcp.close()
            if port != 0:
                raise
            continue
        tcp.listen(5)
        udp.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 20)
        try:
            udp.setsockopt(socket.SOL_SOCKET, _SO_TIMESTAMPNS, 1)
        except OSError:
            pass  # fall back to read-time stamping
        udp.setblocking(False)
        return tcp, udp, bound
    raise OSError(f"could not bind matching tcp/udp ports: {last}")


class ProbeReceiver:
    """Receive side: timestamps arriving trains and answers over TCP.

    run_once serves exactly one control connection, then returns; callers
    wanting a long-lived endpoint loop on it. shape_mbps, when set, rewrites
    arrival times as if the train had crossed a bottleneck of that bandwidth.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0, shape_mbps: float | None = None):
        if shape_mbps is not None and not shape_mbps > 0:
            raise ValueError("shape_mbps must be positive")
        self.host = host
        self.shape_mbps = shape_mbps
        self._tcp, self._udp, self.port = _bind_pair(host, port)

    def close(self) -> None:
        self._tcp.close()
        self._udp.close()

    def __enter__(self) -> "ProbeReceiver":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _note_arrival(self, trains: dict[int, _TrainState], data: bytes, t_ns: int, now: float) -> None:
        try:
            train_id, seq, length, _, _ = decode_packet(data)
        except BadPacket:
            return
        st = trains.get(train_id)
        if st is None:
            st = trains[train_id] = _TrainState(train_id=train_id)
        if st.length is None:
            st.length = length
        if st.size is None:
            st.size = len(data)
        if seq not in st.arrivals:  # first arrival wins over duplicates
            st.arrivals[seq] = t_ns
        st.last_activity = now

    def run_once(self) -> None:
        sel = selectors.DefaultSelector()
        sel.register(self._tcp, selectors.EVENT_READ)
        sel.register(self._udp, selectors.EVENT_READ)
        conn: socket.socket | None = None
        trains: dict[int, _TrainState] = {}
        buf = bytearray()
        try:
            while True:
                events = sel.select(timeout=0.02)
                now = time.monotonic()
                for key, _ in events:
                    sock = key.fileobj
                    if sock is self._tcp:
                        c, _addr = self._tcp.accept()
                        if conn is not None:
                            c.close()
                            continue
                        conn = c
                        conn.setblocking(False)
                        sel.register(conn, selectors.EVENT_READ)
                    elif sock is self._udp:
                        while True:
                            try:
                                data, ancdata, _flags, _addr = self._udp.recvmsg(
                                    _MAX_DATAGRAM, _ANC_SPACE
                                )
                            except BlockingIOError:
                                break
                            t_ns = _kernel_timestamp_ns(ancdata)
                            if t_ns is None:
                                t_ns = time.perf_counter_ns()
                            self._note_arrival(trains, data, t_ns, now)
                    elif sock is conn:
                        try:
                            chunk = conn.recv(4096)
                        except BlockingIOError:
                            continue
                        if not chunk:
                            return  # sender done with this probe
                        buf.extend(chunk)
                        while True:
                            nl = buf.find(b"\n")
                            if nl < 0:
                                break
                            line = bytes(buf[:nl])
                            del buf[: nl + 1]
                            self._handle_line(trains, line, now)
                done = [tid for tid, st in trains.items() if st.complete(now)]
                for tid in sorted(done):
                    st = trains.pop(tid)
                    if conn is not None:
                        payload = (json.dumps(st.summary(self.shape_mbps)) + "\n").encode()
                        conn.setblocking(True)
                        conn.sendall(payload)
                        conn.setblocking(False)
        finally:
            if conn is not None:
                conn.close()
            sel.close()

    @staticmethod
    def _handle_line(trains: dict[int, _TrainState], line: bytes, now: float) -> None:
        if not line.strip():
            return
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            return
        start = msg.get("start")
        if start is None:
            return
        try:
            train_id = int(start["train_id"])
            length = int(start["length"])
            size = int(start["size"])
        except (KeyError, TypeError, ValueError):
            return
        st = trains.get(train_id)
        if st is None:
            st = trains[train_id] = _TrainState(train_id=train_id)
        st.length = length
        st.size = size
        st.last_activity = now
