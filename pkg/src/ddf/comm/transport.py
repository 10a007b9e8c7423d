"""Point-to-point transports.

Both transports deliver frames ``(tag, payload)`` into a per-source FIFO at the
receiver, so a receive names its source and expects the next frame from it.
A frame tag packs ``src_rank << 24 | phase << 20 | buffer_index``.

On the wire (TCP) a frame is ``u32 tag | u64 length | payload``, little-endian.
"""
from __future__ import annotations

import logging
import os
import queue
import socket
import struct
import threading
import time

log = logging.getLogger(__name__)

FRAME = struct.Struct("<IQ")
HELLO = struct.Struct("<IIH")  # rank, listen port, host length

PHASE_META = 0
PHASE_DATA = 1
MAX_WORLD = 256
DEFAULT_TIMEOUT = 30.0
_POLL = 0.05


class TransportError(RuntimeError):
    pass


def make_tag(rank: int, phase: int, index: int) -> int:
    if index >= 1 << 20:
        raise TransportError(f"buffer index {index} exceeds frame tag range")
    return (rank << 24) | (phase << 20) | index


def split_tag(tag: int) -> tuple[int, int, int]:
    return tag >> 24, (tag >> 20) & 0xF, tag & 0xFFFFF


class _Closed:
    def __init__(self, reason: str):
        self.reason = reason


class Mailbox:
    """Per-source inbound FIFOs for one rank."""

    def __init__(self, world_size: int, abort: threading.Event | None = None):
        self.queues = [queue.Queue() for _ in range(world_size)]
        self.abort = abort

    def put(self, src: int, tag: int, payload: bytes) -> None:
        self.queues[src].put((tag, payload))

    def close_source(self, src: int, reason: str) -> None:
        self.queues[src].put((None, _Closed(reason)))

    def get(self, me: int, src: int, tag: int, timeout: float) -> bytes:
        deadline = time.monotonic() + timeout
        q = self.queues[src]
        while True:
            if self.abort is not None and self.abort.is_set():
                raise TransportError(f"rank {me}: world aborted while receiving from rank {src}")
            left = deadline - time.monotonic()
            if left <= 0:
                _, phase, idx = split_tag(tag)
                raise TransportError(
                    f"rank {me}: timed out after {timeout}s waiting for rank {src} "
                    f"(phase {'meta' if phase == PHASE_META else 'data'}, buffer {idx})")
            try:
                got_tag, payload = q.get(timeout=min(left, _POLL))
            except queue.Empty:
                continue
            if isinstance(payload, _Closed):
                q.put((None, payload))  # keep reporting on later receives
                _, phase, idx = split_tag(tag)
                raise TransportError(
                    f"rank {me}: connection to rank {src} lost during "
                    f"{'meta' if phase == PHASE_META else 'data'} phase: {payload.reason}")
            if got_tag != tag:
                raise TransportError(
                    f"rank {me}: out-of-order frame from rank {src}: "
                    f"expected {split_tag(tag)}, got {split_tag(got_tag)}")
            return payload


# -- in-process transport ---------------------------------------------------

class LocalWorld:
    """P isolated workers in one process; only byte payloads cross between them."""

    def __init__(self, world_size: int):
        if not 1 <= world_size <= MAX_WORLD:
            raise ValueError(f"world size must be in [1, {MAX_WORLD}]")
        self.world_size = world_size
        self.abort = threading.Event()
        self.mailboxes = [Mailbox(world_size, self.abort) for _ in range(world_size)]

    def endpoint(self, rank: int) -> LocalTransport:
        return LocalTransport(self, rank)


class LocalTransport:
    kind = "local"

    def __init__(self, world: LocalWorld, rank: int):
        self.world = world
        self.rank = rank
        self.world_size = world.world_size

    def send(self, dest: int, tag: int, payload: bytes) -> None:
        self.world.mailboxes[dest].put(self.rank, tag, bytes(payload))

    def recv(self, src: int, tag: int, timeout: float) -> bytes:
        return self.world.mailboxes[self.rank].get(self.rank, src, tag, timeout)

    def close(self) -> None:
        pass


# -- TCP transport ----------------------------------------------------------

def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            raise ConnectionError(f"short read: got {got} of {n} bytes")
        got += k
    return bytes(buf)


def _connect(host: str, port: int, deadline: float) -> socket.socket:
    while True:
        try:
            s = socket.create_connection((host, port), timeout=max(0.1, deadline - time.monotonic()))
            s.settimeout(None)
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return s
        except OSError:
            if time.monotonic() > deadline:
                raise TransportError(f"could not connect to {host}:{port}") from None
            time.sleep(0.05)


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


class TcpTransport:
    """Full mesh of TCP links with a rendezvous at rank 0.

    Rank 0 listens on the coordinator address; every other rank opens its own
    listener, dials rank 0 and announces ``(rank, port)``.  Rank 0 replies with
    the address table, then rank ``i`` dials every rank ``0 < j < i`` and
    accepts from every ``j > i``.  One reader thread per link drains frames
    into the mailbox, so senders never wait on a peer's progress.
    """

    kind = "tcp"

    def __init__(self, rank: int, world_size: int, coord: str, timeout: float = DEFAULT_TIMEOUT):
        if not 0 <= rank < world_size <= MAX_WORLD:
            raise ValueError(f"bad rank/world {rank}/{world_size}")
        self.rank = rank
        self.world_size = world_size
        self.timeout = timeout
        self.mailbox = Mailbox(world_size)
        self.socks: dict[int, socket.socket] = {}
        self._locks: dict[int, threading.Lock] = {}
        self._threads: list[threading.Thread] = []
        self._closing = False
        if world_size > 1:
            self._rendezvous(*parse_address(coord))
        for peer, s in self.socks.items():
            self._locks[peer] = threading.Lock()
            th = threading.Thread(target=self._reader, args=(peer, s), daemon=True,
                                  name=f"ddf-rx-{rank}<-{peer}")
            th.start()
            self._threads.append(th)

    @classmethod
    def from_env(cls, timeout: float | None = None) -> TcpTransport:
        rank = int(os.environ["DDF_RANK"])
        world = int(os.environ["DDF_WORLD"])
        coord = os.environ.get("DDF_COORD", "127.0.0.1:29500")
        return cls(rank, world, coord, timeout or float(os.environ.get("DDF_TIMEOUT", DEFAULT_TIMEOUT)))

    def _rendezvous(self, host: str, port: int) -> None:
        deadline = time.monotonic() + self.timeout
        P = self.world_size
        if self.rank == 0:
            lsock = socket.create_server((host, port), reuse_port=False)
            lsock.settimeout(self.timeout)
            table = {}
            try:
                while len(table) < P - 1:
                    s, (peer_host, _) = lsock.accept()
                    s.settimeout(None)
                    s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                    r, lport, hlen = HELLO.unpack(_recv_exact(s, HELLO.size))
                    lhost = _recv_exact(s, hlen).decode()
                    table[r] = (lhost, lport)
                    self.socks[r] = s
            except socket.timeout:
                raise TransportError(f"rank 0: only {len(table)} of {P - 1} peers joined") from None
            finally:
                lsock.close()
            blob = ";".join(f"{r}={h}:{p}" for r, (h, p) in sorted(table.items())).encode()
            for s in self.socks.values():
                s.sendall(struct.pack("<I", len(blob)) + blob)
            return
        lsock = socket.create_server(("127.0.0.1" if host in ("localhost", "127.0.0.1") else "", 0))
        lsock.settimeout(self.timeout)
        lport = lsock.getsockname()[1]
        myhost = host if host in ("localhost", "127.0.0.1") else socket.gethostname()
        s0 = _connect(host, port, deadline)
        s0.sendall(HELLO.pack(self.rank, lport, len(myhost)) + myhost.encode())
        (blen,) = struct.unpack("<I", _recv_exact(s0, 4))
        table = {}
        for item in _recv_exact(s0, blen).decode().split(";"):
            r, addr = item.split("=")
            table[int(r)] = parse_address(addr)
        self.socks[0] = s0
        for j in range(1, self.rank):
            s = _connect(*table[j], deadline)
            s.sendall(HELLO.pack(self.rank, 0, 0))
            self.socks[j] = s
        try:
            while len(self.socks) < P - 1:
                s, _ = lsock.accept()
                s.settimeout(None)
                s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                r, _, hlen = HELLO.unpack(_recv_exact(s, HELLO.size))
                _recv_exact(s, hlen)
                self.socks[r] = s
        except socket.timeout:
            raise TransportError(f"rank {self.rank}: mesh setup timed out") from None
        finally:
            lsock.close()

    def _reader(self, peer: int, s: socket.socket) -> None:
        try:
            while True:
                tag, n = FRAME.unpack(_recv_exact(s, FRAME.size))
                payload = _recv_exact(s, n) if n else b""
                self.mailbox.put(peer, tag, payload)
        except (OSError, ConnectionError, struct.error) as e:
            if not self._closing:
                log.debug("rank %d: link to %d closed: %s", self.rank, peer, e)
            self.mailbox.close_source(peer, str(e) or type(e).__name__)

    def send(self, dest: int, tag: int, payload: bytes) -> None:
        if dest == self.rank:
            self.mailbox.put(dest, tag, bytes(payload))
            return
        try:
            with self._locks[dest]:
                self.socks[dest].sendall(FRAME.pack(tag, len(payload)))
                if payload:
                    self.socks[dest].sendall(payload)
        except OSError as e:
            raise TransportError(f"rank {self.rank}: send to rank {dest} failed: {e}") from None

    def recv(self, src: int, tag: int, timeout: float) -> bytes:
        return self.mailbox.get(self.rank, src, tag, timeout)

    def close(self) -> None:
        self._closing = True
        for s in self.socks.values():
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()
        self.socks.clear()
