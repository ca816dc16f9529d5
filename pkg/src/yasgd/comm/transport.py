"""Point-to-point transports and worker bootstrap.

Two transports share one interface: ``send(dst, WireMessage)`` and
``recv(src) -> WireMessage`` with reliable FIFO delivery per ordered pair.

* loopback: all ranks are threads of one process and exchange encoded
  frames through per-pair queues of a hub registered under an address
  string;
* tcp: one process per rank, a rendezvous listener on rank 0 and one
  persistent duplex socket per peer pair.

Send is non-blocking for loopback and blocking (``sendall``) for tcp;
receive blocks.  Every rank must take part in every collective in the same
order or the job deadlocks until the receive timeout fires.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import socket
import threading
import time
from dataclasses import dataclass

import numpy as np

from .wire import HEADER, WireMessage, payload_size

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0
BARRIER_GROUP = 0xFFFFFFFF
_POLL = 0.05
_EMPTY = np.zeros(0, dtype=np.float32)


class CommError(RuntimeError):
    pass


class CommTimeout(CommError):
    pass


class HandshakeError(CommError):
    pass


class CommAborted(CommError):
    pass


@dataclass(frozen=True)
class RingTopology:
    world_size: int
    rank: int

    def __post_init__(self):
        if self.world_size < 1 or not 0 <= self.rank < self.world_size:
            raise ValueError(f"invalid topology: rank {self.rank} of {self.world_size}")

    @property
    def successor(self) -> int:
        return (self.rank + 1) % self.world_size

    @property
    def predecessor(self) -> int:
        return (self.rank - 1) % self.world_size


@dataclass
class TransportStats:
    bytes_sent: int = 0
    bytes_received: int = 0
    payload_bytes_sent: int = 0
    payload_bytes_received: int = 0
    messages_sent: int = 0
    messages_received: int = 0
    control_bytes: int = 0


class Transport:
    mode = "abstract"

    def __init__(self, rank: int, world_size: int, timeout: float = DEFAULT_TIMEOUT):
        self.rank = rank
        self.world_size = world_size
        self.timeout = timeout
        self.stats = TransportStats()
        self._stats_lock = threading.Lock()

    def _count_sent(self, msg: WireMessage, nbytes: int):
        with self._stats_lock:
            self.stats.bytes_sent += nbytes
            self.stats.payload_bytes_sent += len(msg.payload)
            self.stats.messages_sent += 1

    def _count_received(self, msg: WireMessage, nbytes: int):
        with self._stats_lock:
            self.stats.bytes_received += nbytes
            self.stats.payload_bytes_received += len(msg.payload)
            self.stats.messages_received += 1

    def _check_peer(self, peer: int):
        if not 0 <= peer < self.world_size or peer == self.rank:
            raise CommError(f"rank {self.rank}: invalid peer {peer}")

    def send(self, dst: int, msg: WireMessage) -> None:
        raise NotImplementedError

    def recv(self, src: int, timeout: float | None = None) -> WireMessage:
        raise NotImplementedError

    def abort(self, reason: str) -> None:
        pass

    def close(self) -> None:
        pass

    def barrier(self) -> None:
        """Dissemination barrier: ceil(log2 P) rounds of empty messages."""
        p = self.world_size
        for k in range(math.ceil(math.log2(p)) if p > 1 else 0):
            d = 1 << k
            self.send((self.rank + d) % p, WireMessage.from_array(_EMPTY, 0, BARRIER_GROUP, k))
            msg = self.recv((self.rank - d) % p)
            if msg.group != BARRIER_GROUP or msg.chunk != k:
                raise CommError(f"rank {self.rank}: expected barrier round {k}, got group {msg.group}")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------- loopback


class LoopbackHub:
    def __init__(self, address: str, world_size: int):
        self.address = address
        self.world_size = world_size
        self.queues = {(s, d): queue.Queue() for s in range(world_size) for d in range(world_size) if s != d}
        self.joined: set[int] = set()
        self.aborted = threading.Event()
        self.reason = ""

    def abort(self, reason: str):
        if not self.aborted.is_set():
            self.reason = reason
            self.aborted.set()


_hubs: dict[str, LoopbackHub] = {}
_hubs_lock = threading.Lock()


def _join_hub(address: str, world_size: int, rank: int) -> LoopbackHub:
    with _hubs_lock:
        hub = _hubs.get(address)
        if hub is None:
            hub = _hubs[address] = LoopbackHub(address, world_size)
        if hub.world_size != world_size:
            reason = (f"rank {rank}: world_size {world_size} disagrees with {hub.world_size} "
                      f"announced at {address!r}")
            hub.abort(reason)
            _hubs.pop(address, None)
            raise HandshakeError(reason)
        if not 0 <= rank < world_size or rank in hub.joined:
            reason = f"rank {rank}: invalid or duplicate rank for world of {world_size} at {address!r}"
            hub.abort(reason)
            _hubs.pop(address, None)
            raise HandshakeError(reason)
        hub.joined.add(rank)
        if len(hub.joined) == world_size:
            _hubs.pop(address, None)
        return hub


class LoopbackTransport(Transport):
    mode = "loopback"

    def __init__(self, hub: LoopbackHub, rank: int, timeout: float = DEFAULT_TIMEOUT):
        super().__init__(rank, hub.world_size, timeout)
        self.hub = hub

    def send(self, dst, msg):
        self._check_peer(dst)
        if self.hub.aborted.is_set():
            raise CommAborted(f"rank {self.rank}: job aborted: {self.hub.reason}")
        data = msg.encode()
        self.hub.queues[(self.rank, dst)].put(data)
        self._count_sent(msg, len(data))

    def recv(self, src, timeout=None):
        self._check_peer(src)
        timeout = self.timeout if timeout is None else timeout
        q = self.hub.queues[(src, self.rank)]
        deadline = time.monotonic() + timeout
        while True:
            if self.hub.aborted.is_set():
                raise CommAborted(f"rank {self.rank}: job aborted: {self.hub.reason}")
            try:
                data = q.get(timeout=_POLL)
                break
            except queue.Empty:
                if time.monotonic() > deadline:
                    raise CommTimeout(f"rank {self.rank}: no message from rank {src} within {timeout:.1f}s") from None
        msg = WireMessage.decode(data)
        self._count_received(msg, len(data))
        return msg

    def abort(self, reason):
        self.hub.abort(reason)


# --------------------------------------------------------------------- tcp


def _parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port:
        raise ValueError(f"rendezvous address must be HOST:PORT, got {address!r}")
    return host, int(port)


def _send_json(sock, obj) -> int:
    data = (json.dumps(obj) + "\n").encode()
    sock.sendall(data)
    return len(data)


def _recv_json(sock) -> tuple[dict, int]:
    buf = bytearray()
    while not buf.endswith(b"\n"):
        chunk = sock.recv(1)
        if not chunk:
            raise HandshakeError("connection closed during handshake")
        buf += chunk
    return json.loads(buf), len(buf)


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf += chunk
    return bytes(buf)


class TcpTransport(Transport):
    mode = "tcp"

    def __init__(self, rank, world_size, socks: dict[int, socket.socket], timeout=DEFAULT_TIMEOUT,
                 control_bytes: int = 0):
        super().__init__(rank, world_size, timeout)
        self.stats.control_bytes = control_bytes
        self.socks = socks
        self.inbox = {peer: queue.Queue() for peer in socks}
        self.send_locks = {peer: threading.Lock() for peer in socks}
        self._closing = False
        self._abort_reason = ""
        self.readers = []
        for peer, sock in socks.items():
            t = threading.Thread(target=self._reader, args=(peer, sock), daemon=True,
                                 name=f"tcp-reader-{rank}<-{peer}")
            t.start()
            self.readers.append(t)

    def _reader(self, peer, sock):
        try:
            while True:
                header = _recv_exact(sock, HEADER.size)
                payload = _recv_exact(sock, payload_size(header))
                self.inbox[peer].put(header + payload)
        except (OSError, ValueError) as exc:
            if not self._closing:
                self.inbox[peer].put(exc)

    def send(self, dst, msg):
        self._check_peer(dst)
        if self._abort_reason:
            raise CommAborted(f"rank {self.rank}: job aborted: {self._abort_reason}")
        data = msg.encode()
        try:
            with self.send_locks[dst]:
                self.socks[dst].sendall(data)
        except OSError as exc:
            raise CommError(f"rank {self.rank}: send to rank {dst} failed: {exc}") from exc
        self._count_sent(msg, len(data))

    def recv(self, src, timeout=None):
        self._check_peer(src)
        timeout = self.timeout if timeout is None else timeout
        try:
            item = self.inbox[src].get(timeout=timeout)
        except queue.Empty:
            raise CommTimeout(f"rank {self.rank}: no message from rank {src} within {timeout:.1f}s") from None
        if isinstance(item, Exception):
            raise CommError(f"rank {self.rank}: connection to rank {src} failed: {item}")
        msg = WireMessage.decode(item)
        self._count_received(msg, len(item))
        return msg

    def abort(self, reason):
        self._abort_reason = reason
        self.close()

    def close(self):
        if self._closing:
            return
        self._closing = True
        for sock in self.socks.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()


def _connect_retry(addr, deadline, rank, what):
    while True:
        try:
            sock = socket.create_connection(addr, timeout=max(0.1, deadline - time.monotonic()))
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return sock
        except OSError:
            if time.monotonic() > deadline:
                raise CommTimeout(f"rank {rank}: could not reach {what} at {addr[0]}:{addr[1]}") from None
            time.sleep(0.05)


def _tcp_bootstrap(world_size: int, rank: int, address: str, timeout: float) -> TcpTransport:
    host, port = _parse_address(address)
    deadline = time.monotonic() + timeout
    control = 0

    data_listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    data_listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    data_listener.bind((host, 0))
    data_listener.listen(max(world_size, 1))
    my_port = data_listener.getsockname()[1]

    # rendezvous: rank 0 collects every rank's data address and checks world agreement
    if rank == 0:
        table = {0: (host, my_port)}
        rv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        rv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        rv.bind((host, port))
        rv.listen(max(world_size, 1))
        clients = []
        error = None
        try:
            while len(clients) < world_size - 1:
                rv.settimeout(max(0.01, deadline - time.monotonic()))
                try:
                    conn, _ = rv.accept()
                except socket.timeout:
                    raise CommTimeout(f"rank 0: only {len(clients)} of {world_size - 1} peers "
                                      f"registered at {address} within {timeout:.1f}s") from None
                conn.settimeout(max(0.01, deadline - time.monotonic()))
                hello, n = _recv_json(conn)
                control += n
                clients.append(conn)
                if hello["world"] != world_size:
                    error = (f"rank {hello['rank']} announced world_size {hello['world']}, "
                             f"rank 0 expects {world_size}")
                    break
                if hello["rank"] in table or not 0 < hello["rank"] < world_size:
                    error = f"invalid or duplicate rank {hello['rank']}"
                    break
                table[hello["rank"]] = (hello["host"], hello["port"])
            reply = {"error": error} if error else {"table": {str(k): v for k, v in table.items()}}
            for conn in clients:
                try:
                    control += _send_json(conn, reply)
                except OSError:
                    pass
                conn.close()
        finally:
            rv.close()
        if error:
            data_listener.close()
            raise HandshakeError(f"rank 0: handshake rejected: {error}")
    else:
        conn = _connect_retry((host, port), deadline, rank, "rendezvous")
        conn.settimeout(max(0.01, deadline - time.monotonic()))
        try:
            control += _send_json(conn, {"rank": rank, "world": world_size, "host": host, "port": my_port})
            reply, n = _recv_json(conn)
            control += n
        except socket.timeout:
            raise CommTimeout(f"rank {rank}: rendezvous at {address} did not answer within {timeout:.1f}s") from None
        finally:
            conn.close()
        if "error" in reply:
            data_listener.close()
            raise HandshakeError(f"rank {rank}: handshake rejected: {reply['error']}")
        table = {int(k): tuple(v) for k, v in reply["table"].items()}

    # mesh: connect to every lower rank, accept every higher rank
    socks = {}
    for peer in range(rank):
        sock = _connect_retry(tuple(table[peer]), deadline, rank, f"rank {peer}")
        sock.sendall(rank.to_bytes(4, "little"))
        control += 4
        socks[peer] = sock
    while len(socks) < world_size - 1:
        data_listener.settimeout(max(0.01, deadline - time.monotonic()))
        try:
            sock, _ = data_listener.accept()
        except socket.timeout:
            raise CommTimeout(f"rank {rank}: peers did not connect within {timeout:.1f}s") from None
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        peer = int.from_bytes(_recv_exact(sock, 4), "little")
        control += 4
        socks[peer] = sock
    data_listener.close()
    return TcpTransport(rank, world_size, socks, timeout, control)


def bootstrap(world_size: int, rank: int, mode: str = "loopback", rendezvous: str = "default",
              timeout: float = DEFAULT_TIMEOUT) -> tuple[Transport, RingTopology]:
    """Connect ``rank`` into a world of ``world_size`` and run a barrier.

    No parameter data is exchanged: workers build identical weights from a
    shared seed instead of broadcasting them.
    """
    topo = RingTopology(world_size, rank)
    if mode == "loopback":
        transport = LoopbackTransport(_join_hub(rendezvous, world_size, rank), rank, timeout)
    elif mode == "tcp":
        transport = _tcp_bootstrap(world_size, rank, rendezvous, timeout)
    else:
        raise ValueError(f"unknown transport mode {mode!r}")
    try:
        transport.barrier()
    except CommError:
        transport.close()
        raise
    logger.debug("rank %d/%d connected over %s", rank, world_size, mode)
    return transport, topo
