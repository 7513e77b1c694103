"""Threaded round drivers: in-process queue channels and framed TCP sockets.

Message content is transport-independent: aggregation sorts by sender and
ring sums commute, so a threaded or socket run finishes with bitwise the
same state as the lockstep memory driver.  Sends never block (queues are
unbounded; socket conns flush through a writer thread), which keeps the
all-pairs share exchange deadlock-free regardless of scheduling.

Connection setup for sockets uses an 8-byte hello preamble
(``b"SMFH"`` + little-endian u32 party id) so accepted connections can be
attributed to a peer; everything after the hello is standard frames.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time

import numpy as np

from .errors import TransportError
from .protocol import RunMetrics, TrainingResult, build_parties, pooled_ratings
from .mf import loss
from .wire import GradientMessage, MsgType, encode_frame, frame_size, read_frame

DEFAULT_TIMEOUT = 30.0
HELLO_MAGIC = b"SMFH"
HELLO_SIZE = 8

_CLOSED = object()


class QueueConn:
    """One end of an in-process duplex channel."""

    def __init__(self, inbox: queue.SimpleQueue, outbox: queue.SimpleQueue):
        self._inbox = inbox
        self._outbox = outbox

    def send(self, msg: GradientMessage):
        self._outbox.put(msg)

    def recv(self) -> GradientMessage:
        try:
            item = self._inbox.get(timeout=DEFAULT_TIMEOUT)
        except queue.Empty:
            raise TransportError("timed out waiting for a frame") from None
        if item is _CLOSED:
            raise TransportError("channel closed")
        return item

    def close(self):
        self._outbox.put(_CLOSED)
        self._inbox.put(_CLOSED)


def queue_pair() -> tuple[QueueConn, QueueConn]:
    a, b = queue.SimpleQueue(), queue.SimpleQueue()
    return QueueConn(a, b), QueueConn(b, a)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except socket.timeout:
            raise TransportError("timed out waiting for socket data") from None
        except OSError as exc:
            raise TransportError(f"socket receive failed: {exc}") from None
        if not chunk:
            raise TransportError("connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


class SocketConn:
    """A framed TCP connection with a non-blocking send side."""

    def __init__(self, sock: socket.socket):
        sock.settimeout(DEFAULT_TIMEOUT)
        self.sock = sock
        self._outbox: queue.SimpleQueue = queue.SimpleQueue()
        self._writer_error: Exception | None = None
        self._writer = threading.Thread(target=self._write_loop, daemon=True)
        self._writer.start()

    def _write_loop(self):
        while True:
            data = self._outbox.get()
            if data is _CLOSED:
                return
            try:
                self.sock.sendall(data)
            except OSError as exc:
                self._writer_error = exc
                return

    def send(self, msg: GradientMessage):
        if self._writer_error is not None:
            raise TransportError(f"socket send failed: {self._writer_error}")
        self._outbox.put(encode_frame(msg))

    def recv(self) -> GradientMessage:
        return read_frame(lambda n: _recv_exact(self.sock, n))

    def close(self):
        self._outbox.put(_CLOSED)
        self._writer.join(timeout=DEFAULT_TIMEOUT)
        try:
            self.sock.close()
        except OSError:
            pass


def _listen() -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.bind(("127.0.0.1", 0))
    sock.listen(16)
    sock.settimeout(DEFAULT_TIMEOUT)
    return sock


def _dial(addr, my_id: int) -> SocketConn:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.settimeout(DEFAULT_TIMEOUT)
    try:
        sock.connect(addr)
        sock.sendall(HELLO_MAGIC + struct.pack("<I", my_id))
    except OSError as exc:
        raise TransportError(f"failed to connect to {addr}: {exc}") from None
    return SocketConn(sock)


def _accept_identified(listener: socket.socket, count: int) -> dict[int, SocketConn]:
    conns = {}
    for _ in range(count):
        try:
            sock, _ = listener.accept()
        except socket.timeout:
            raise TransportError("timed out waiting for a peer to connect") from None
        sock.settimeout(DEFAULT_TIMEOUT)
        hello = _recv_exact(sock, HELLO_SIZE)
        if hello[:4] != HELLO_MAGIC:
            raise TransportError(f"bad hello preamble {hello[:4]!r}")
        (peer_id,) = struct.unpack("<I", hello[4:])
        conns[peer_id] = SocketConn(sock)
    return conns


class _Counters:
    """Per-thread byte accounting, merged into RunMetrics after join."""

    def __init__(self):
        self.by_channel: dict[str, int] = {}
        self.per_round: dict[int, int] = {}
        self.done_bytes = 0
        self.setup_bytes = 0

    def frame(self, src, dst, msg: GradientMessage):
        size = frame_size(*msg.payload.shape) if msg.payload is not None else frame_size(0, 0)
        key = f"{src}->{dst}"
        self.by_channel[key] = self.by_channel.get(key, 0) + size
        if msg.msg_type == MsgType.DONE:
            self.done_bytes += size
        else:
            self.per_round[msg.round] = self.per_round.get(msg.round, 0) + size


def threaded_run(cfg, partition, share_rng_factory=None) -> TrainingResult:
    """Run one party per thread over queue channels or TCP sockets."""
    server, sources, ids = build_parties(cfg, partition, share_rng_factory)
    T = cfg.n_sources
    mesh_needed = cfg.mode == "shared"

    server_conns: dict[int, object] = {}
    source_server_conn: dict[int, object] = {}
    peer_conns: dict[int, dict[int, object]] = {t: {} for t in range(T)}
    setup_bytes: dict[int, int] = {t: 0 for t in range(T)}

    if cfg.transport == "memory":
        for t in range(T):
            a, b = queue_pair()
            server_conns[t] = a
            source_server_conn[t] = b
        if mesh_needed:
            for i in range(T):
                for j in range(i + 1, T):
                    a, b = queue_pair()
                    peer_conns[i][j] = a
                    peer_conns[j][i] = b
        listeners = {}
        server_listener = None
    else:
        server_listener = _listen()
        listeners = {t: _listen() for t in range(T)} if mesh_needed else {}
        addr_book = {t: l.getsockname() for t, l in listeners.items()}
        server_addr = server_listener.getsockname()

    counters = {"server": _Counters(), **{t: _Counters() for t in range(T)}}
    wall_ms: list[float] = []
    errors: list[tuple[str, Exception]] = []
    done_event = threading.Event()

    def server_main():
        c = counters["server"]
        if cfg.transport == "socket":
            server_conns.update(_accept_identified(server_listener, T))
        conns = server_conns
        converged = False
        for _ in range(cfg.train.max_epochs):
            t0 = time.perf_counter()
            bmsg = server.broadcast()
            for t, conn in conns.items():
                conn.send(bmsg)
                c.frame("server", str(t), bmsg)
            msgs = [conn.recv() for conn in conns.values()]
            converged = server.handle_gradients(msgs)
            wall_ms.append((time.perf_counter() - t0) * 1e3)
            if converged:
                break
        dmsg = server.done_message()
        for t, conn in conns.items():
            conn.send(dmsg)
            c.frame("server", str(t), dmsg)
        return converged

    def source_main(t):
        src = sources[t]
        c = counters[t]
        if cfg.transport == "socket":
            sconn = _dial(server_addr, t)
            c.setup_bytes += HELLO_SIZE
            if mesh_needed:
                for j in range(t + 1, T):
                    peer_conns[t][j] = _dial(addr_book[j], t)
                    c.setup_bytes += HELLO_SIZE
                peer_conns[t].update(_accept_identified(listeners[t], t))
        else:
            sconn = source_server_conn[t]
        peers = peer_conns[t]
        while True:
            msg = sconn.recv()
            if msg.msg_type == MsgType.DONE:
                return
            src.apply_broadcast(msg)
            if cfg.mode == "plain":
                out = src.round_plain()
                sconn.send(out)
                c.frame(str(t), "server", out)
            else:
                shares = src.share_phase()
                for peer, share in shares.items():
                    peers[peer].send(share)
                    c.frame(str(t), str(peer), share)
                incoming = [peers[j].recv() for j in sorted(peers)]
                hybrid = src.hybrid_phase(incoming)
                sconn.send(hybrid)
                c.frame(str(t), "server", hybrid)

    outcome = {}

    def guarded(name, fn, *args):
        try:
            outcome[name] = fn(*args)
        except Exception as exc:  # propagate to the caller after join
            errors.append((name, exc))
            done_event.set()

    threads = [threading.Thread(target=guarded, args=("server", server_main), daemon=True)]
    threads += [
        threading.Thread(target=guarded, args=(f"source-{t}", source_main, t), daemon=True)
        for t in range(T)
    ]
    for th in threads:
        th.start()

    deadline = time.monotonic() + max(DEFAULT_TIMEOUT, 0.2 * cfg.train.max_epochs) + 30.0
    for th in threads:
        th.join(timeout=max(0.1, deadline - time.monotonic()))
    all_conns = list(server_conns.values()) + list(source_server_conn.values())
    for t in range(T):
        all_conns += list(peer_conns[t].values())
    for conn in all_conns:
        try:
            conn.close()
        except Exception:
            pass
    if server_listener is not None:
        server_listener.close()
    for l in listeners.values():
        l.close()
    if errors:
        name, exc = errors[0]
        raise exc
    if any(th.is_alive() for th in threads):
        raise TransportError("a party thread failed to finish")

    metrics = RunMetrics()
    per_round: dict[int, int] = {}
    for c in counters.values():
        for key, val in c.by_channel.items():
            metrics.bytes_by_channel[key] = metrics.bytes_by_channel.get(key, 0) + val
        for rnd, val in c.per_round.items():
            per_round[rnd] = per_round.get(rnd, 0) + val
        metrics.done_bytes += c.done_bytes
        metrics.setup_bytes += c.setup_bytes
    metrics.bytes_per_round = [per_round.get(r, 0) for r in range(server.round)]
    metrics.round_wall_ms = wall_ms
    metrics.rounds = server.round
    metrics.converged = bool(outcome.get("server", False))
    metrics.clamp_events = sum(src.clamp_events for src in sources)

    # Per-round pooled loss needs lockstep access to all parties; here only
    # the final value is recorded.
    pooled = pooled_ratings(partition)
    U = np.zeros((pooled.n_users, cfg.train.dim))
    for t, src in enumerate(sources):
        U[ids[t]] = src.U
    metrics.loss_history = [loss(U, server.V, pooled, cfg.train.reg_user, cfg.train.reg_item)]

    return TrainingResult(
        V=server.V,
        source_U=[src.U for src in sources],
        user_ids=list(ids),
        metrics=metrics,
    )
