"""TCP transport: one coordinator, k workers, star topology.

The coordinator owns the global parameters and the outer optimizer
(:class:`~diloco.engine.OuterLoop`); each worker process owns one
:class:`~diloco.engine.WorkerNode`. Per outer step the coordinator sends a
PARAMS frame to every active worker and waits at a barrier for their
OUTER_GRAD frames. A worker that disconnects or misses the barrier deadline
is recorded as dropped for that round, exactly like a sampled drop.

After each OUTER_GRAD a worker also sends an ACK whose payload is its mean
training loss for the phase (one f64). It only feeds the ``train_loss``
column and is not counted in ``bytes_communicated``.
"""

from __future__ import annotations

import logging
import queue
import socket
import statistics
import struct
import threading
import time

from .config import RunConfig
from .data import Corpus
from .engine import (OuterGradient, OuterLoop, Recorder, RunResult, WorkerNode, prepare,
                     round_drop_mask, run_pretrain_stage, summarize)
from .metrics import MetricsLog
from .wire import (Message, MsgType, ProtocolError, config_hash_bytes, encode_message,
                   read_message)

log = logging.getLogger(__name__)

_LOSS = struct.Struct("<d")
MIN_BARRIER_TIMEOUT = 1.0  # seconds


def parse_addr(addr) -> tuple[str, int]:
    if isinstance(addr, tuple):
        return addr[0], int(addr[1])
    host, _, port = str(addr).rpartition(":")
    if not port.isdigit():
        raise ValueError(f"address {addr!r} is not host:port")
    return host or "127.0.0.1", int(port)


class _Conn:
    """One accepted worker connection with its own writer thread."""

    def __init__(self, sock: socket.socket, worker_id: int, gen: int):
        self.sock = sock
        self.worker_id = worker_id
        self.gen = gen
        self.alive = True
        self._out: queue.Queue = queue.Queue()
        self._writer = threading.Thread(target=self._write_loop, daemon=True,
                                        name=f"writer-{worker_id}")
        self._writer.start()

    def send(self, msg: Message) -> int:
        frame = encode_message(msg)
        self._out.put(frame)
        return len(frame)

    def _write_loop(self):
        while True:
            frame = self._out.get()
            if frame is None:
                break
            try:
                self.sock.sendall(frame)
            except OSError:
                self.alive = False
                break

    def close(self, wait: float = 0.0):
        self._out.put(None)
        if wait:
            self._writer.join(wait)
        self.alive = False
        try:
            self.sock.close()
        except OSError:
            pass


class CoordinatorServer:
    """Binds immediately; :meth:`run` pretrains, trains and returns the result."""

    def __init__(self, cfg: RunConfig, corpus: Corpus, bind=("127.0.0.1", 0),
                 sink: MetricsLog | None = None):
        self.cfg = cfg.resolved()
        self.prep = prepare(self.cfg, corpus)
        self.hash = self.prep.config_hash
        self.sink = sink
        self.param_count = self.cfg.model_config().num_params
        self._sock = socket.create_server(parse_addr(bind))
        self.address = self._sock.getsockname()[:2]
        self._lock = threading.Lock()
        self._conns: dict[int, _Conn] = {}
        self._ever_joined: set[int] = set()
        self._rejoined: set[int] = set()
        self._gen = 0
        self._joined = threading.Condition(self._lock)
        self._inbox: queue.Queue = queue.Queue()
        self._closing = False
        self._phase_times: list[float] = []
        self._acceptor = threading.Thread(target=self._accept_loop, daemon=True, name="accept")
        self._acceptor.start()

    # -- connections --------------------------------------------------------

    def _accept_loop(self):
        while not self._closing:
            try:
                sock, _ = self._sock.accept()
            except OSError:
                return
            threading.Thread(target=self._serve, args=(sock,), daemon=True).start()

    def _reject(self, sock, worker_id: int, reason: str):
        log.warning("rejecting JOIN from worker %d: %s", worker_id, reason)
        try:
            sock.sendall(encode_message(Message(MsgType.SHUTDOWN, worker_id, 0,
                                                reason.encode())))
        except OSError:
            pass
        sock.close()

    def _serve(self, sock: socket.socket):
        sock.settimeout(self.cfg.join_timeout)
        try:
            msg = read_message(sock)
        except (OSError, ProtocolError, ConnectionError) as exc:
            log.warning("bad JOIN: %s", exc)
            sock.close()
            return
        wid = msg.worker_id
        if msg.msg_type != MsgType.JOIN:
            return self._reject(sock, wid, f"expected JOIN, got {msg.msg_type.name}")
        if msg.payload != config_hash_bytes(self.hash):
            return self._reject(sock, wid, "config hash mismatch")
        if wid >= self.cfg.max_k:
            return self._reject(sock, wid, f"worker_id {wid} >= {self.cfg.max_k}")
        with self._lock:
            old = self._conns.get(wid)
            if old is not None and old.alive:
                return self._reject(sock, wid, f"duplicate worker_id {wid}")
            if self._closing:
                return self._reject(sock, wid, "run finished")
            self._gen += 1
            conn = _Conn(sock, wid, self._gen)
            # queue the ACK before the round loop can see this connection
            conn.send(Message(MsgType.ACK, wid, 0, config_hash_bytes(self.hash)))
            self._conns[wid] = conn
            if wid in self._ever_joined:
                self._rejoined.add(wid)
            self._ever_joined.add(wid)
            self._joined.notify_all()
        sock.settimeout(None)
        log.info("worker %d joined", wid)
        try:
            while True:
                self._inbox.put((wid, conn.gen, read_message(sock)))
        except (OSError, ProtocolError, ConnectionError) as exc:
            log.info("worker %d connection ended: %s", wid, exc)
        conn.alive = False
        self._inbox.put((wid, conn.gen, None))

    def _live(self, wid: int) -> _Conn | None:
        with self._lock:
            c = self._conns.get(wid)
        return c if c is not None and c.alive else None

    def wait_for_workers(self, ids, timeout: float) -> set[int]:
        deadline = time.monotonic() + timeout
        with self._lock:
            while True:
                live = {w for w in ids if w in self._conns and self._conns[w].alive}
                left = deadline - time.monotonic()
                if live == set(ids) or left <= 0:
                    return live
                self._joined.wait(min(left, 0.5))

    # -- rounds -------------------------------------------------------------

    def _barrier_timeout(self) -> float:
        if self.cfg.barrier_timeout > 0:
            return self.cfg.barrier_timeout
        if not self._phase_times:
            return self.cfg.initial_barrier_timeout
        # the floor keeps scheduling jitter from dropping workers on very short phases
        return max(10.0 * statistics.median(self._phase_times), MIN_BARRIER_TIMEOUT)

    def _round(self, loop: OuterLoop, t: int):
        with self._lock:
            for wid in self._rejoined:
                loop.rejoined(wid)
            self._rejoined.clear()
        sends = loop.plan(t)
        mask = round_drop_mask(self.cfg, t)
        f32 = self.cfg.wire_f32
        sent_at, expected, nbytes = {}, set(), 0
        for wid, params in sends.items():
            conn = self._live(wid)
            if conn is None:
                continue
            n = conn.send(Message.vector(MsgType.PARAMS, wid, t, params, f32))
            loop.note_sent(wid, n, params is not None)
            nbytes += n
            sent_at[wid] = time.monotonic()
            if not mask[wid]:
                expected.add(wid)
        gens = {}
        for wid in sent_at:
            conn = self._live(wid)
            if conn is not None:
                gens[wid] = conn.gen
        grads, losses = {}, {}
        deadline = time.monotonic() + self._barrier_timeout()
        # done when every expected worker has sent its gradient and loss, or is gone
        while expected - set(losses):
            left = deadline - time.monotonic()
            if left <= 0:
                late = sorted(expected - set(grads))
                if late:
                    log.warning("outer step %d: barrier timeout, dropping %s", t, late)
                break
            try:
                wid, gen, msg = self._inbox.get(timeout=left)
            except queue.Empty:
                continue
            if gen != gens.get(wid):
                continue
            if msg is None:
                if wid in expected and wid not in losses:
                    log.warning("outer step %d: worker %d disconnected", t, wid)
                expected.discard(wid)
                continue
            if msg.outer_step != t:
                continue  # stale upload from a round already closed
            if msg.msg_type == MsgType.OUTER_GRAD and wid in expected:
                if msg.value_count != self.param_count:
                    log.warning("worker %d sent %d values, expected %d; closing",
                                wid, msg.value_count, self.param_count)
                    conn = self._live(wid)
                    if conn is not None:
                        conn.close()
                    expected.discard(wid)
                    continue
                loop.note_received(wid, msg.frame_size)
                nbytes += msg.frame_size
                grads[wid] = OuterGradient(wid, t, msg.values(),
                                           self.prep.shards[wid].num_tokens)
                self._phase_times.append(time.monotonic() - sent_at[wid])
            elif msg.msg_type == MsgType.ACK and wid in grads and len(msg.payload) == _LOSS.size:
                losses[wid] = _LOSS.unpack(msg.payload)[0]
        return loop.complete(t, grads, losses, nbytes)

    def run(self) -> RunResult:
        cfg = self.cfg
        try:
            recorder = Recorder(cfg, self.prep.val, self.sink)
            theta0 = run_pretrain_stage(self.prep, recorder)
            loop = OuterLoop(cfg, theta0)
            first = set(range(cfg.k_at(1)))
            live = self.wait_for_workers(first, cfg.join_timeout)
            if live != first:
                log.warning("starting without workers %s", sorted(first - live))
            rounds = []
            for t in range(1, cfg.T + 1):
                rec = self._round(loop, t)
                rounds.append(rec)
                recorder.round_row(rec, loop.theta)
            return RunResult(loop.theta, recorder.records, rounds,
                             summarize(cfg, loop, rounds, recorder.records))
        finally:
            self.close()

    def close(self):
        with self._lock:
            self._closing = True
            conns = list(self._conns.values())
        for c in conns:
            if c.alive:
                c.send(Message(MsgType.SHUTDOWN, c.worker_id, 0, b"done"))
            c.close(wait=5.0)
        try:
            self._sock.close()
        except OSError:
            pass


def coordinator_serve(bind, cfg: RunConfig, corpus: Corpus,
                      sink: MetricsLog | None = None) -> RunResult:
    server = CoordinatorServer(cfg, corpus, bind, sink)
    log.info("coordinator listening on %s:%d", *server.address)
    return server.run()


# ---------------------------------------------------------------------------
# worker
# ---------------------------------------------------------------------------


def _connect(addr, window: float) -> socket.socket:
    """Connect with exponential backoff for at most ``window`` seconds."""
    deadline = time.monotonic() + window
    delay = 0.05
    while True:
        try:
            return socket.create_connection(addr, timeout=max(1.0, window))
        except OSError as exc:
            left = deadline - time.monotonic()
            if left <= 0:
                raise ConnectionError(f"cannot reach coordinator at {addr[0]}:{addr[1]}: "
                                      f"{exc}") from exc
            time.sleep(min(delay, left))
            delay = min(delay * 2, 2.0)


def _join(sock: socket.socket, worker_id: int, h: int, timeout: float) -> None:
    sock.settimeout(timeout)
    sock.sendall(encode_message(Message(MsgType.JOIN, worker_id, 0, config_hash_bytes(h))))
    reply = read_message(sock)
    if reply.msg_type == MsgType.SHUTDOWN:
        raise ProtocolError(f"coordinator refused JOIN: {reply.payload.decode(errors='replace')}")
    if reply.msg_type != MsgType.ACK or reply.payload != config_hash_bytes(h):
        raise ProtocolError("unexpected JOIN reply")
    sock.settimeout(None)


def _serve_rounds(sock, node: WorkerNode, param_count: int, f32: bool) -> bool:
    """Handle PARAMS until SHUTDOWN (returns True) or the connection drops."""
    wid = node.worker_id
    while True:
        msg = read_message(sock)
        if msg.msg_type == MsgType.SHUTDOWN:
            log.info("worker %d: shutdown (%s)", wid, msg.payload.decode(errors="replace"))
            return True
        if msg.msg_type != MsgType.PARAMS:
            continue
        if msg.payload and msg.value_count != param_count:
            raise ProtocolError(f"length: PARAMS carries {msg.value_count} values, "
                                f"model has {param_count}")
        t = msg.outer_step
        g = node.run_round(t, msg.values())
        if g is None:
            continue  # sampled drop: nothing goes out this round
        sock.sendall(encode_message(Message.vector(MsgType.OUTER_GRAD, wid, t, g.delta, f32)))
        sock.sendall(encode_message(Message(MsgType.ACK, wid, t,
                                            _LOSS.pack(node.state.last_loss))))


def worker_run(addr, worker_id: int, cfg: RunConfig, corpus: Corpus) -> None:
    """Join the coordinator and train until it says SHUTDOWN.

    A lost connection is retried with backoff for ``connect_retry_window``
    seconds; after a reconnect the worker starts over from the parameters
    the coordinator sends. Raises ConnectionError when the coordinator stays
    unreachable and ProtocolError on a refused JOIN or a malformed frame.
    """
    cfg = cfg.resolved()
    addr = parse_addr(addr)
    prep = prepare(cfg, corpus)
    if not 0 <= worker_id < cfg.max_k:
        raise ValueError(f"worker_id must be in [0, {cfg.max_k})")
    node = WorkerNode(worker_id, cfg, prep.train, prep.shards[worker_id])
    param_count = cfg.model_config().num_params
    while True:
        sock = _connect(addr, cfg.connect_retry_window)
        try:
            _join(sock, worker_id, prep.config_hash, cfg.join_timeout)
            if _serve_rounds(sock, node, param_count, cfg.wire_f32):
                return
        except ProtocolError:
            raise
        except (OSError, ConnectionError) as exc:
            log.warning("worker %d lost the coordinator (%s); reconnecting", worker_id, exc)
            node.reset()
        finally:
            sock.close()


def run_tcp_local(cfg: RunConfig, corpus: Corpus, sink: MetricsLog | None = None) -> RunResult:
    """A whole run over loopback TCP: coordinator here, workers in threads."""
    cfg = cfg.resolved()
    server = CoordinatorServer(cfg, corpus, ("127.0.0.1", 0), sink)
    errors = []

    def work(wid):
        try:
            worker_run(server.address, wid, cfg, corpus)
        except Exception as exc:  # surfaced after the run
            errors.append((wid, exc))

    threads = [threading.Thread(target=work, args=(w,), daemon=True, name=f"worker-{w}")
               for w in range(cfg.max_k)]
    for th in threads:
        th.start()
    result = server.run()
    for th in threads:
        th.join(10.0)
    if errors:
        log.warning("worker errors: %s", errors)
    return result
