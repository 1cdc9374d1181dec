"""Cross-lab coupling: wire protocol, sessions, and run coordination.

Transport is a reliable ordered byte stream carrying length-prefixed JSON
frames. One session can multiplex several experiments; every frame is
tagged with its experiment id and handed to the owning coordinator through
a dedicated queue, so parallel experiments cannot observe each other.

Time management is conservative: member labs report their local event
horizon (TAR), the master computes the lower bound on any future event and
grants advancement (TAG) to one lab at a time. Envelopes that cross labs
are acknowledged before the next grant goes out, which makes a federated
run reproduce the single-process event order exactly, even over zero-delay
channels.
"""

from __future__ import annotations

import json
import os
import queue
import socket
import threading
import time as _time
from dataclasses import dataclass
from typing import Optional

from . import bus
from .kernel import Kernel, StepFailure, Trace, lbts
from .plan import ExecutionPlan, FederationTopology, plan_to_dict

PROTO_VERSION = 1
DEFAULT_PORT = 7841
MAX_FRAME_BYTES = 16 * 1024 * 1024
ACK_TIMEOUT_S = 5.0
CONNECT_TIMEOUT_S = 10.0
CONNECT_RETRIES = 3
CONNECT_BACKOFF_S = 1.0
STALL_TIMEOUT_S = 120.0

FRAME_TYPES = ("HELLO", "PLAN", "TAR", "TAG", "MSG", "STOP", "ACK")


class FrameTooLarge(Exception):
    pass


class Truncated(Exception):
    """Stream ended inside a frame."""


class BadLength(Exception):
    """Length prefix outside the protocol bounds."""


class BadFrame(Exception):
    """Unknown type or schema violation in a decoded frame."""


class VersionMismatch(Exception):
    pass


class DuplicateExperiment(Exception):
    pass


class UnknownExperiment(Exception):
    pass


class PeerDisconnect(Exception):
    pass


class PlanMismatch(Exception):
    """Master and member compiled different plans from their scenario files."""


@dataclass
class Frame:
    type: str
    experiment_id: str
    frame_seq: int
    body: dict


def _wire_time(t: Optional[int]):
    return "inf" if t is None else t


def _time_from_wire(value) -> Optional[int]:
    if value == "inf":
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise BadFrame(f"expected integer or 'inf', got {value!r}")
    return value


_BODY_KEYS = {
    "HELLO": ("lab_id", "proto_version"),
    "PLAN": ("plan",),
    "TAR": ("lab_id", "local_min_us", "pending_min_us"),
    "TAG": ("granted_until_us",),
    "MSG": (
        "route_id",
        "seq",
        "t_send_us",
        "t_deliver_us",
        "quantity",
        "unit",
        "value",
        "experiment_id",
    ),
    "STOP": ("reason",),
    "ACK": ("of_type", "of_seq"),
}


def encode_frame(frame: Frame) -> bytes:
    """Length-prefixed canonical JSON with fixed key order, no whitespace."""
    body = {key: frame.body[key] for key in _BODY_KEYS[frame.type]}
    obj = {
        "type": frame.type,
        "experiment_id": frame.experiment_id,
        "frame_seq": frame.frame_seq,
        "body": body,
    }
    payload = json.dumps(obj, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    if len(payload) > MAX_FRAME_BYTES:
        raise FrameTooLarge(f"frame is {len(payload)} bytes")
    return len(payload).to_bytes(4, "big") + payload


def _validate_frame(obj) -> Frame:
    if not isinstance(obj, dict):
        raise BadFrame("frame is not an object")
    ftype = obj.get("type")
    if ftype not in FRAME_TYPES:
        raise BadFrame(f"unknown frame type {ftype!r}")
    experiment_id = obj.get("experiment_id")
    if not isinstance(experiment_id, str):
        raise BadFrame("experiment_id must be a string")
    frame_seq = obj.get("frame_seq")
    if isinstance(frame_seq, bool) or not isinstance(frame_seq, int) or frame_seq < 0:
        raise BadFrame("frame_seq must be a nonnegative integer")
    body = obj.get("body")
    if not isinstance(body, dict):
        raise BadFrame("body must be an object")
    for key in _BODY_KEYS[ftype]:
        if key not in body:
            raise BadFrame(f"{ftype} body missing {key!r}")
    if ftype == "TAR":
        _time_from_wire(body["local_min_us"])
        _time_from_wire(body["pending_min_us"])
    if ftype == "STOP" and not isinstance(body["reason"], str):
        raise BadFrame("STOP reason must be a string")
    return Frame(type=ftype, experiment_id=experiment_id, frame_seq=frame_seq, body=body)


def _parse_one(buffer: bytes) -> Optional[tuple[Frame, int]]:
    """Parse the first frame of the buffer; None when more bytes are needed."""
    if len(buffer) < 4:
        return None
    length = int.from_bytes(buffer[:4], "big")
    if length > MAX_FRAME_BYTES:
        raise BadLength(f"length prefix {length} exceeds the 16 MiB limit")
    if len(buffer) < 4 + length:
        return None
    try:
        obj = json.loads(buffer[4 : 4 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadFrame(f"frame payload is not valid JSON: {exc}") from exc
    return _validate_frame(obj), 4 + length


def decode_frame(data: bytes) -> Frame:
    """Decode one frame from a byte buffer (tolerant of key order)."""
    parsed = _parse_one(data)
    if parsed is None:
        raise Truncated(f"need a complete frame, have {len(data)} bytes")
    return parsed[0]


class FrameReader:
    """Incremental decoder for a byte stream."""

    def __init__(self):
        self._buffer = b""

    def feed(self, data: bytes) -> list[Frame]:
        self._buffer += data
        frames = []
        while True:
            parsed = _parse_one(self._buffer)
            if parsed is None:
                return frames
            frame, consumed = parsed
            self._buffer = self._buffer[consumed:]
            frames.append(frame)

    def at_eof(self) -> None:
        """Call when the stream ends; raises Truncated on a partial frame."""
        if self._buffer:
            raise Truncated(f"stream ended inside a frame ({len(self._buffer)} bytes)")


DISCONNECT = object()  # sentinel posted to inboxes when the peer goes away


class _TaggedSink:
    """Adapter that forwards frames into a shared queue, tagged by session."""

    def __init__(self, session: "SessionHost", shared: queue.SimpleQueue):
        self.session = session
        self.shared = shared

    def put(self, item) -> None:
        self.shared.put((self.session, item))


class SessionHost:
    """One transport connection multiplexing any number of experiments.

    A single reader thread decodes frames and demuxes them, by experiment
    id, into per-experiment inboxes; writers share one lock. Frames for
    experiments never registered here are answered with a STOP scoped to
    that experiment id and counted, nothing else.
    """

    def __init__(self, sock: socket.socket):
        self._sock = sock
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass  # not a TCP socket (socketpair in tests)
        self._send_lock = threading.Lock()
        self._send_seq = 0
        self._recv_seq = -1
        self._inboxes: dict[str, object] = {}
        self._inbox_lock = threading.Lock()
        self.peer_lab: Optional[str] = None
        self.states: dict[str, str] = {}  # experiment -> New | Ready | Stopped
        self.unknown_experiment_count = 0
        self.closed = False
        self._reader = threading.Thread(target=self._read_loop, daemon=True)

    def start(self) -> None:
        self._reader.start()

    def register(self, experiment_id: str, sink=None):
        """Claim an experiment id on this session; returns its inbox."""
        with self._inbox_lock:
            if experiment_id in self._inboxes:
                raise DuplicateExperiment(experiment_id)
            inbox = sink if sink is not None else queue.SimpleQueue()
            self._inboxes[experiment_id] = inbox
            self.states[experiment_id] = "New"
            if self.closed:
                inbox.put(DISCONNECT)
            return inbox

    def send(self, ftype: str, experiment_id: str, body: dict) -> int:
        """Encode and send one frame; returns the frame_seq it was given."""
        with self._send_lock:
            seq = self._send_seq
            self._send_seq += 1
            data = encode_frame(
                Frame(type=ftype, experiment_id=experiment_id, frame_seq=seq, body=body)
            )
            try:
                self._sock.sendall(data)
            except OSError as exc:
                raise PeerDisconnect(str(exc)) from exc
        return seq

    def _read_loop(self) -> None:
        reader = FrameReader()
        try:
            while True:
                chunk = self._sock.recv(65536)
                if not chunk:
                    reader.at_eof()
                    break
                for frame in reader.feed(chunk):
                    self._dispatch(frame)
        except Exception:
            pass
        self._post_disconnect()

    def _dispatch(self, frame: Frame) -> None:
        if frame.frame_seq <= self._recv_seq:
            raise BadFrame(
                f"frame_seq went backwards: {frame.frame_seq} after {self._recv_seq}"
            )
        self._recv_seq = frame.frame_seq
        with self._inbox_lock:
            inbox = self._inboxes.get(frame.experiment_id)
        if inbox is not None:
            inbox.put(frame)
            return
        self.unknown_experiment_count += 1
        if frame.type != "STOP":  # never answer a stray STOP with another STOP
            try:
                self.send("STOP", frame.experiment_id, {"reason": "unknown_experiment"})
            except PeerDisconnect:
                pass

    def _post_disconnect(self) -> None:
        with self._inbox_lock:
            self.closed = True
            for inbox in self._inboxes.values():
                inbox.put(DISCONNECT)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def handshake(
    session: SessionHost,
    my_lab: str,
    experiment_id: str,
    timeout: float = CONNECT_TIMEOUT_S,
) -> queue.SimpleQueue:
    """Exchange HELLOs for one experiment; returns the registered inbox."""
    inbox = session.register(experiment_id)
    session.send(
        "HELLO", experiment_id, {"lab_id": my_lab, "proto_version": PROTO_VERSION}
    )
    try:
        frame = inbox.get(timeout=timeout)
    except queue.Empty as exc:
        raise PeerDisconnect("no HELLO from peer") from exc
    if frame is DISCONNECT:
        raise PeerDisconnect("connection lost during handshake")
    if frame.type != "HELLO":
        raise BadFrame(f"expected HELLO, got {frame.type}")
    if frame.body["proto_version"] != PROTO_VERSION:
        session.close()
        raise VersionMismatch(
            f"peer speaks version {frame.body['proto_version']}, not {PROTO_VERSION}"
        )
    session.peer_lab = frame.body["lab_id"]
    session.states[experiment_id] = "Ready"
    return inbox


def connect_with_retry(host: str, port: int) -> socket.socket:
    """Dial a peer: bounded retries with backoff inside the overall timeout."""
    deadline = _time.monotonic() + CONNECT_TIMEOUT_S
    last_error: Optional[Exception] = None
    for attempt in range(CONNECT_RETRIES):
        remaining = deadline - _time.monotonic()
        if remaining <= 0:
            break
        try:
            return socket.create_connection((host, port), timeout=remaining)
        except OSError as exc:
            last_error = exc
            if attempt < CONNECT_RETRIES - 1:
                _time.sleep(min(CONNECT_BACKOFF_S, max(0.0, deadline - _time.monotonic())))
    raise PeerDisconnect(f"cannot reach {host}:{port}: {last_error}")


def parse_bind(endpoint: str, env: Optional[str] = None) -> tuple[str, int]:
    """Bind address for a listener; GRIDWEAVE_BIND overrides host and port."""
    host, _, port = endpoint.rpartition(":")
    port_num = int(port) if port else DEFAULT_PORT
    override = env if env is not None else os.environ.get("GRIDWEAVE_BIND")
    if override:
        if ":" in override:
            ohost, _, oport = override.rpartition(":")
            return ohost, int(oport)
        return override, port_num
    return host, port_num


# ---------------------------------------------------------------------------
# Coordinators


@dataclass
class _TarInfo:
    local_min: Optional[int] = None
    pending_min: Optional[int] = None
    version: int = 0
    received: bool = False


class MemberCoordinator:
    """Non-master lab: executes its plan under grants from the master."""

    def __init__(
        self,
        lab_id: str,
        kernel: Kernel,
        session: SessionHost,
        inbox: queue.SimpleQueue,
    ):
        self.lab_id = lab_id
        self.kernel = kernel
        self.session = session
        self.inbox = inbox
        self.experiment_id = kernel.experiment_id
        self.last_grant_us: Optional[int] = None
        self._unacked: dict[int, int] = {}  # frame_seq -> t_deliver_us
        kernel.egress_handler = self._egress

    def _egress(self, env: bus.Envelope) -> None:
        seq = self.session.send("MSG", self.experiment_id, bus.envelope_to_obj(env))
        self._unacked[seq] = env.t_deliver_us

    def _send_tar(self) -> None:
        pending = min(self._unacked.values()) if self._unacked else None
        self.session.send(
            "TAR",
            self.experiment_id,
            {
                "lab_id": self.lab_id,
                "local_min_us": _wire_time(self.kernel.local_min()),
                "pending_min_us": _wire_time(pending),
            },
        )

    def _ack(self, frame: Frame) -> None:
        self.session.send(
            "ACK", self.experiment_id, {"of_type": frame.type, "of_seq": frame.frame_seq}
        )

    def run(self) -> Trace:
        """Drive grants until a STOP arrives or the peer goes away."""
        self.kernel.start()
        try:
            self._send_tar()
            while True:
                frame = self.inbox.get(timeout=STALL_TIMEOUT_S)
                if frame is DISCONNECT:
                    self.kernel.stop_all("peer_disconnect")
                    break
                if frame.type == "TAG":
                    grant = frame.body["granted_until_us"]
                    self.last_grant_us = grant
                    try:
                        self.kernel.advance_until(grant)
                    except StepFailure as exc:
                        self.kernel.trace.error = str(exc)
                        self.session.send(
                            "STOP", self.experiment_id, {"reason": "component_failure"}
                        )
                        self.kernel.stop_all("component_failure")
                        break
                    if not self._drain_acks():
                        break
                    self._send_tar()
                elif frame.type == "MSG":
                    self.kernel.enqueue_remote(bus.envelope_from_wire(frame.body))
                    self._ack(frame)
                elif frame.type == "STOP":
                    self.kernel.stop_all(frame.body["reason"])
                    self._ack(frame)
                    break
        except (queue.Empty, PeerDisconnect):
            self.kernel.stop_all("peer_disconnect")
        self.session.states[self.experiment_id] = "Stopped"
        return self.kernel.trace

    def _drain_acks(self) -> bool:
        """Block until the master confirmed every envelope of this window."""
        while self._unacked:
            frame = self.inbox.get(timeout=STALL_TIMEOUT_S)
            if frame is DISCONNECT:
                self.kernel.stop_all("peer_disconnect")
                return False
            if frame.type == "ACK" and frame.body["of_type"] == "MSG":
                self._unacked.pop(frame.body["of_seq"], None)
            elif frame.type == "MSG":
                self.kernel.enqueue_remote(bus.envelope_from_wire(frame.body))
                self._ack(frame)
            elif frame.type == "STOP":
                self.kernel.stop_all(frame.body["reason"])
                self._ack(frame)
                return False
        return True


class MasterCoordinator:
    """Master lab: runs its own plan and owns time management for the rest.

    Grants reach exactly one lab at a time and stay strictly below every
    other lab's horizon, so cross-lab envelopes are always enqueued (and
    acknowledged) at their destination before the destination may step past
    their delivery time. Member-to-member traffic is relayed here.
    """

    def __init__(
        self,
        lab_id: str,
        kernel: Kernel,
        plans: dict[str, ExecutionPlan],
        sessions: dict[str, SessionHost],
        shared_inbox: queue.SimpleQueue,
    ):
        self.lab_id = lab_id
        self.kernel = kernel
        self.sessions = sessions  # member lab -> session
        self.inbox = shared_inbox  # items: (session, frame) or (session, DISCONNECT)
        self.experiment_id = kernel.experiment_id
        self.duration_us = kernel.run.duration_us
        self.grants_sent: dict[str, list[int]] = {lab: [] for lab in sessions}

        self._session_lab = {session: lab for lab, session in sessions.items()}
        self._route_dest: dict[int, str] = {}
        for lab, plan in plans.items():
            for route in plan.ingress_routes:
                self._route_dest[route.route_id] = lab
        self._tars: dict[str, _TarInfo] = {lab: _TarInfo() for lab in sessions}
        self._unacked: dict[tuple[str, int], int] = {}  # (lab, seq) -> t_deliver
        self._failure: Optional[str] = None
        kernel.egress_handler = self._egress

    def _egress(self, env: bus.Envelope) -> None:
        dest = self._route_dest[env.route_id]
        seq = self.sessions[dest].send("MSG", self.experiment_id, bus.envelope_to_obj(env))
        self._unacked[(dest, seq)] = env.t_deliver_us

    def _pump(self, timeout: float = STALL_TIMEOUT_S) -> None:
        try:
            session, frame = self.inbox.get(timeout=timeout)
        except queue.Empty:
            self._failure = "peer_disconnect"
            return
        lab = self._session_lab.get(session)
        if lab is None:
            return
        if frame is DISCONNECT:
            self._failure = "peer_disconnect"
            return
        if frame.type == "TAR":
            info = self._tars[lab]
            info.local_min = _time_from_wire(frame.body["local_min_us"])
            info.pending_min = _time_from_wire(frame.body["pending_min_us"])
            info.version += 1
            info.received = True
        elif frame.type == "MSG":
            env = bus.envelope_from_wire(frame.body)
            dest = self._route_dest.get(env.route_id)
            if dest == self.lab_id:
                self.kernel.enqueue_remote(env)
            elif dest is not None:
                fwd_seq = self.sessions[dest].send("MSG", self.experiment_id, frame.body)
                self._unacked[(dest, fwd_seq)] = env.t_deliver_us
            session.send(
                "ACK", self.experiment_id, {"of_type": "MSG", "of_seq": frame.frame_seq}
            )
        elif frame.type == "ACK":
            if frame.body["of_type"] == "MSG":
                self._unacked.pop((lab, frame.body["of_seq"]), None)
        elif frame.type == "STOP":
            self._failure = frame.body["reason"]

    def stop_broadcast(self, reason: str) -> None:
        """STOP every member; wait for ACKs at most the wall-clock timeout."""
        waiting = {}
        for lab, session in self.sessions.items():
            if session.states.get(self.experiment_id) == "Stopped":
                continue
            try:
                seq = session.send("STOP", self.experiment_id, {"reason": reason})
                waiting[lab] = seq
            except PeerDisconnect:
                pass
        deadline = _time.monotonic() + ACK_TIMEOUT_S
        while waiting:
            remaining = deadline - _time.monotonic()
            if remaining <= 0:
                break
            try:
                session, frame = self.inbox.get(timeout=remaining)
            except queue.Empty:
                break
            lab = self._session_lab.get(session)
            if lab is None:
                continue
            if frame is DISCONNECT:
                waiting.pop(lab, None)
                continue
            if frame.type == "ACK" and frame.body["of_type"] == "STOP":
                if waiting.get(lab) == frame.body["of_seq"]:
                    waiting.pop(lab, None)
        for session in self.sessions.values():
            session.states[self.experiment_id] = "Stopped"

    def run(self) -> Trace:
        self.kernel.start()
        try:
            self._loop()
        except StepFailure as exc:
            self.kernel.trace.error = str(exc)
            self._finish("component_failure")
        except PeerDisconnect:
            self._finish("peer_disconnect")
        return self.kernel.trace

    def _finish(self, reason: str) -> None:
        self.stop_broadcast(reason)
        self.kernel.stop_all(reason)

    def _loop(self) -> None:
        while True:
            if self._failure:
                self._finish(self._failure)
                return
            if not all(info.received for info in self._tars.values()):
                self._pump()
                continue
            if self._unacked:
                self._pump()
                continue

            # Members drain MSG acknowledgements before sending TAR, so at
            # this point their piggybacked pending minima are infinite and
            # lbts degenerates to the minimum local horizon.
            minima: dict[str, Optional[int]] = {self.lab_id: self.kernel.local_min()}
            for lab, info in self._tars.items():
                minima[lab] = info.local_min
            pendings = [t for t in self._unacked.values()] + [
                info.pending_min for info in self._tars.values() if info.pending_min is not None
            ]
            bound = lbts(list(minima.values()), min(pendings) if pendings else None, self.duration_us)
            finite = sorted((t, lab) for lab, t in minima.items() if t is not None)
            if not finite or finite[0][0] > self.duration_us:
                self._finish("completed")
                return

            m, owner = finite[0]
            if m > bound:
                self._pump()  # a pending delivery below the horizon; wait it out
                continue
            others = [t for t, lab in finite if lab != owner]
            others_bound = min(others) if others else None
            if others_bound is None:
                grant = self.duration_us
            elif others_bound > m:
                grant = min(others_bound - 1, self.duration_us)
            else:
                grant = m
            if owner == self.lab_id:
                self.kernel.advance_until(grant)
            else:
                version = self._tars[owner].version
                self.grants_sent[owner].append(grant)
                self.sessions[owner].send(
                    "TAG", self.experiment_id, {"granted_until_us": grant}
                )
                while self._tars[owner].version == version and not self._failure:
                    self._pump()


# ---------------------------------------------------------------------------
# Process-level setup used by the CLI


def accept_members(
    listener: socket.socket,
    master_lab: str,
    member_labs: list[str],
    experiment_id: str,
    plans: dict[str, ExecutionPlan],
    timeout: float = CONNECT_TIMEOUT_S,
) -> tuple[dict[str, SessionHost], queue.SimpleQueue]:
    """Accept one connection per member, handshake, and push each its plan."""
    shared: queue.SimpleQueue = queue.SimpleQueue()
    sessions: dict[str, SessionHost] = {}
    deadline = _time.monotonic() + timeout
    listener.settimeout(0.2)
    pending_hello = set(member_labs)
    unclaimed: list[SessionHost] = []
    while pending_hello:
        if _time.monotonic() > deadline:
            for session in list(sessions.values()) + unclaimed:
                session.close()
            raise PeerDisconnect(
                f"labs {sorted(pending_hello)} did not connect within {timeout:.0f} s"
            )
        try:
            sock, _addr = listener.accept()
        except socket.timeout:
            sock = None
        if sock is not None:
            session = SessionHost(sock)
            session.register(experiment_id, sink=_TaggedSink(session, shared))
            session.start()
            unclaimed.append(session)
        # consume HELLOs that already arrived
        try:
            while True:
                session, frame = shared.get_nowait()
                if frame is DISCONNECT:
                    continue
                if frame.type != "HELLO":
                    continue
                if frame.body["proto_version"] != PROTO_VERSION:
                    session.close()
                    continue
                lab = frame.body["lab_id"]
                if lab not in pending_hello:
                    session.close()
                    continue
                pending_hello.discard(lab)
                session.peer_lab = lab
                session.states[experiment_id] = "Ready"
                sessions[lab] = session
                session.send(
                    "HELLO",
                    experiment_id,
                    {"lab_id": master_lab, "proto_version": PROTO_VERSION},
                )
                session.send(
                    "PLAN", experiment_id, {"plan": plan_to_dict(plans[lab])}
                )
        except queue.Empty:
            pass
    return sessions, shared


def join_master(
    lab_id: str, master_endpoint: str, experiment_id: str
) -> tuple[SessionHost, queue.SimpleQueue, dict]:
    """Member side: dial, handshake, and receive this lab's plan."""
    host, _, port = master_endpoint.rpartition(":")
    sock = connect_with_retry(host, int(port))
    session = SessionHost(sock)
    session.start()
    inbox = handshake(session, lab_id, experiment_id)
    try:
        frame = inbox.get(timeout=CONNECT_TIMEOUT_S)
    except queue.Empty as exc:
        raise PeerDisconnect("no PLAN from master") from exc
    if frame is DISCONNECT:
        raise PeerDisconnect("connection lost waiting for PLAN")
    if frame.type != "PLAN":
        raise BadFrame(f"expected PLAN, got {frame.type}")
    return session, inbox, frame.body["plan"]
