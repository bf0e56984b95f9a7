"""Point-to-point messaging and barriers between worker ranks.

Two transports share one interface: an in-process cluster whose ranks are
threads, and a multi-process transport over localhost TCP streams with
addresses published in a shared run directory.  Both deliver messages in
send order per (src, dst) pair.
"""

from __future__ import annotations

import os
import queue
import socket
import struct
import threading
import time
from collections import deque
from pathlib import Path

MAX_MESSAGE = 16 * 1024 * 1024
IN_FLIGHT_BUDGET = 64 * 1024 * 1024
DEFAULT_TIMEOUT = 120.0

FRAME = struct.Struct("<BII")  # kind, src, length
DATA, ARRIVE, RELEASE = 0, 1, 2


class TransportError(RuntimeError):
    pass


class TransportTimeout(TransportError):
    pass


class MessageTooLarge(ValueError):
    pass


def _check_size(payload: bytes) -> None:
    if len(payload) > MAX_MESSAGE:
        raise MessageTooLarge(f"message of {len(payload)} bytes exceeds the {MAX_MESSAGE}-byte limit")


class _Inbox:
    """Arrival-ordered mailbox supporting receive-from-any or from one source."""

    def __init__(self):
        self._items: deque[tuple[int, bytes]] = deque()
        self._cond = threading.Condition()
        self.bytes = 0
        self.aborted = False

    def abort(self) -> None:
        with self._cond:
            self.aborted = True
            self._cond.notify_all()

    def put(self, src: int, payload: bytes) -> None:
        with self._cond:
            self._items.append((src, payload))
            self.bytes += len(payload)
            self._cond.notify_all()

    def get(self, src: int | None, timeout: float) -> tuple[int, bytes]:
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                if self.aborted:
                    raise TransportError("transport aborted (peer failed)")
                for i, (s, payload) in enumerate(self._items):
                    if src is None or s == src:
                        del self._items[i]
                        self.bytes -= len(payload)
                        self._cond.notify_all()
                        return s, payload
                left = deadline - time.monotonic()
                if left <= 0:
                    raise TransportTimeout(f"no message from {'any rank' if src is None else f'rank {src}'}")
                self._cond.wait(left)

    def wait_below(self, budget: int, timeout: float) -> None:
        deadline = time.monotonic() + timeout
        with self._cond:
            while self.bytes > budget:
                left = deadline - time.monotonic()
                if left <= 0:
                    raise TransportTimeout("in-flight budget exhausted")
                self._cond.wait(left)


class Transport:
    mode = "abstract"

    def __init__(self, rank: int, world_size: int, timeout: float = DEFAULT_TIMEOUT):
        if not 0 <= rank < world_size:
            raise ValueError(f"rank {rank} outside [0, {world_size})")
        self.rank = rank
        self.world_size = world_size
        self.timeout = timeout
        self.sent = 0
        self.received = 0
        self.comm_seconds = 0.0

    def send(self, dst: int, payload: bytes) -> None:
        raise NotImplementedError

    def recv(self, src: int | None = None, timeout: float | None = None) -> tuple[int, bytes]:
        raise NotImplementedError

    def barrier(self, timeout: float | None = None) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def _check_dst(self, dst: int) -> None:
        if not 0 <= dst < self.world_size:
            raise ValueError(f"destination rank {dst} outside [0, {self.world_size})")


class InProcessCluster:
    """Shared state for ``world_size`` in-process ranks."""

    def __init__(self, world_size: int, timeout: float = DEFAULT_TIMEOUT, budget: int = IN_FLIGHT_BUDGET):
        self.world_size = world_size
        self.timeout = timeout
        self.budget = budget
        self.inboxes = [_Inbox() for _ in range(world_size)]
        self._barrier = threading.Barrier(world_size)

    def transport(self, rank: int) -> "InProcessTransport":
        return InProcessTransport(self, rank)

    def abort(self) -> None:
        self._barrier.abort()
        for inbox in self.inboxes:
            inbox.abort()


class InProcessTransport(Transport):
    mode = "in-process"

    def __init__(self, cluster: InProcessCluster, rank: int):
        super().__init__(rank, cluster.world_size, cluster.timeout)
        self.cluster = cluster

    def send(self, dst: int, payload: bytes) -> None:
        self._check_dst(dst)
        _check_size(payload)
        t = time.perf_counter()
        inbox = self.cluster.inboxes[dst]
        inbox.wait_below(self.cluster.budget, self.timeout)
        inbox.put(self.rank, bytes(payload))
        self.sent += 1
        self.comm_seconds += time.perf_counter() - t

    def recv(self, src: int | None = None, timeout: float | None = None) -> tuple[int, bytes]:
        t = time.perf_counter()
        out = self.cluster.inboxes[self.rank].get(src, self.timeout if timeout is None else timeout)
        self.received += 1
        self.comm_seconds += time.perf_counter() - t
        return out

    def barrier(self, timeout: float | None = None) -> None:
        try:
            self.cluster._barrier.wait(self.timeout if timeout is None else timeout)
        except threading.BrokenBarrierError:
            raise TransportTimeout(f"rank {self.rank}: barrier broken (peer failed or timed out)") from None


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            return None
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def address_file(comm_dir: str | os.PathLike, rank: int) -> Path:
    return Path(comm_dir) / f"rank_{rank}.addr"


class SocketTransport(Transport):
    """One listening socket per rank; one outgoing stream per peer, so the
    stream order gives per-pair FIFO delivery.  Rank 0 coordinates barriers."""

    mode = "multi-process"

    def __init__(self, rank: int, world_size: int, comm_dir: str | os.PathLike, timeout: float = DEFAULT_TIMEOUT):
        super().__init__(rank, world_size, timeout)
        self.comm_dir = Path(comm_dir)
        self.comm_dir.mkdir(parents=True, exist_ok=True)
        self.inbox = _Inbox()
        self.control: queue.Queue[tuple[int, int]] = queue.Queue()
        self._out: dict[int, socket.socket] = {}
        self._out_lock = threading.Lock()
        self._closed = False
        self._listener = socket.create_server(("127.0.0.1", 0))
        self._listener.settimeout(0.2)
        port = self._listener.getsockname()[1]
        tmp = address_file(self.comm_dir, rank).with_suffix(".tmp")
        tmp.write_text(f"127.0.0.1 {port}\n")
        os.replace(tmp, address_file(self.comm_dir, rank))
        self._threads = [threading.Thread(target=self._accept_loop, daemon=True)]
        self._threads[0].start()

    def _accept_loop(self) -> None:
        while not self._closed:
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.settimeout(None)
            t = threading.Thread(target=self._reader, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _reader(self, conn: socket.socket) -> None:
        with conn:
            while True:
                head = _recv_exact(conn, FRAME.size)
                if head is None:
                    return
                kind, src, length = FRAME.unpack(head)
                payload = _recv_exact(conn, length) if length else b""
                if payload is None:
                    return
                if kind == DATA:
                    self.inbox.put(src, payload)
                else:
                    self.control.put((kind, src))

    def _peer(self, dst: int) -> socket.socket:
        with self._out_lock:
            sock = self._out.get(dst)
            if sock is not None:
                return sock
            deadline = time.monotonic() + self.timeout
            path = address_file(self.comm_dir, dst)
            while True:
                try:
                    host, port = path.read_text().split()
                    sock = socket.create_connection((host, int(port)), timeout=self.timeout)
                    break
                except (OSError, ValueError):
                    if time.monotonic() > deadline:
                        raise TransportTimeout(f"rank {self.rank}: cannot reach rank {dst}") from None
                    time.sleep(0.05)
            sock.settimeout(self.timeout)
            self._out[dst] = sock
            return sock

    def _frame(self, dst: int, kind: int, payload: bytes = b"") -> None:
        sock = self._peer(dst)
        try:
            sock.sendall(FRAME.pack(kind, self.rank, len(payload)) + payload)
        except OSError as exc:
            raise TransportError(f"rank {self.rank}: send to rank {dst} failed: {exc}") from exc

    def send(self, dst: int, payload: bytes) -> None:
        self._check_dst(dst)
        _check_size(payload)
        t = time.perf_counter()
        if dst == self.rank:
            self.inbox.put(self.rank, bytes(payload))
        else:
            self._frame(dst, DATA, bytes(payload))
        self.sent += 1
        self.comm_seconds += time.perf_counter() - t

    def recv(self, src: int | None = None, timeout: float | None = None) -> tuple[int, bytes]:
        t = time.perf_counter()
        out = self.inbox.get(src, self.timeout if timeout is None else timeout)
        self.received += 1
        self.comm_seconds += time.perf_counter() - t
        return out

    def _control(self, kind: int, timeout: float) -> int:
        try:
            k, src = self.control.get(timeout=timeout)
        except queue.Empty:
            raise TransportTimeout(f"rank {self.rank}: barrier timed out") from None
        if k != kind:
            raise TransportError(f"rank {self.rank}: unexpected control frame {k}")
        return src

    def barrier(self, timeout: float | None = None) -> None:
        timeout = self.timeout if timeout is None else timeout
        if self.world_size == 1:
            return
        deadline = time.monotonic() + timeout
        if self.rank == 0:
            arrived = set()
            while len(arrived) < self.world_size - 1:
                arrived.add(self._control(ARRIVE, max(0.0, deadline - time.monotonic())))
            for dst in range(1, self.world_size):
                self._frame(dst, RELEASE)
        else:
            self._frame(0, ARRIVE)
            self._control(RELEASE, max(0.0, deadline - time.monotonic()))

    def close(self) -> None:
        self._closed = True
        with self._out_lock:
            for sock in self._out.values():
                try:
                    sock.shutdown(socket.SHUT_WR)
                except OSError:
                    pass
                sock.close()
            self._out.clear()
        self._listener.close()
