"""Inference gateway: one TCP hub serving many robot clients.

Threads: one acceptor, one receiver and one sender per connection, a single
inference worker, and a monitoring fan-out. Frames from every robot share one
FramePipeline; results travel back only on the originating session.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import protocol as wire
from .config import ActionDef, GatewayConfig
from .detect import Detector
from .monitor import overlay
from .pipeline import FramePipeline, FrameRateEstimator, PipelineStats
from .protocol import (
    ActionPayload,
    Detection,
    FramePayload,
    HelloStatus,
    MsgType,
    ResultPayload,
)

log = logging.getLogger(__name__)

MONITOR_PREFIX = "mon-"
RECV_CHUNK = 1 << 20


class BindError(OSError):
    pass


class DuplicateSession(ValueError):
    pass


@dataclass
class Frame:
    robot_id: str
    seq: int
    timestamp_us: int
    payload: FramePayload
    arrival_ns: int


@dataclass
class RobotCounters:
    frames: int = 0
    results: int = 0
    actions: int = 0
    out_of_order: int = 0


class RobotSession:
    """Connection state for one robot (or monitor) client."""

    def __init__(self, robot_id: str, conn: socket.socket, bindings: dict[int, int]):
        self.robot_id = robot_id
        self.conn = conn
        self.estimator = FrameRateEstimator()
        self.last_seq: int | None = None
        self.bindings = bindings
        self.counters = RobotCounters()
        self.cooldowns: dict[int, float] = {}
        self._out_seq = 0
        self._seq_lock = threading.Lock()
        self._outbox: queue.SimpleQueue = queue.SimpleQueue()
        self.alive = True
        self._sender = threading.Thread(target=self._send_loop, name=f"send-{robot_id}", daemon=True)
        self._sender.start()

    @property
    def is_monitor(self) -> bool:
        return self.robot_id.startswith(MONITOR_PREFIX)

    def next_seq(self) -> int:
        with self._seq_lock:
            self._out_seq += 1
            return self._out_seq

    def send(self, data: bytes, on_sent: Callable[[], None] | None = None) -> None:
        self._outbox.put((data, on_sent))

    def close(self) -> None:
        """Flush pending output, then close the socket from the sender thread."""
        self._outbox.put(None)

    def _send_loop(self) -> None:
        try:
            while True:
                item = self._outbox.get()
                if item is None:
                    break
                data, on_sent = item
                if self.alive:
                    try:
                        self.conn.sendall(data)
                    except OSError:
                        self.alive = False
                        continue
                    if on_sent is not None:
                        on_sent()
        finally:
            self.alive = False
            try:
                self.conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.conn.close()

    def join(self, timeout: float | None = None) -> None:
        self._sender.join(timeout)


@dataclass
class GatewayStats:
    pipeline: PipelineStats = field(default_factory=PipelineStats)
    dropped_results: int = 0
    detector_errors: int = 0
    robots: dict[str, RobotCounters] = field(default_factory=dict)
    # every (robot_id, frame seq) whose result was handed to a session
    delivered: list[tuple[str, int]] = field(default_factory=list)

    def dropped_for(self, robot_id: str) -> int:
        return self.pipeline.dropped_by_source[robot_id]


class Gateway:
    def __init__(
        self,
        config: GatewayConfig,
        detector: Detector,
        clock_ns: Callable[[], int] = time.perf_counter_ns,
        stats_out: Callable[[str], None] | None = None,
    ):
        self.config = config
        self.detector = detector
        self.clock_ns = clock_ns
        self.stats = GatewayStats()
        self.pipeline = FramePipeline(self.stats.pipeline, clock=lambda: clock_ns() / 1e9)
        self.stats_out = stats_out or (lambda line: print(line, flush=True))
        self._sessions: dict[str, RobotSession] = {}
        self._sessions_lock = threading.Lock()
        self._monitor_q: queue.Queue = queue.Queue(maxsize=8)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._conn_threads: set[threading.Thread] = set()
        self._listener: socket.socket | None = None
        self._t0 = clock_ns()
        # measured detector wall time per inferred frame, for overhead accounting
        self.service_ns: list[int] = []

    # --- lifecycle -------------------------------------------------------------

    def start(self) -> tuple[str, int]:
        host, port = self.config.host_port
        try:
            self._listener = socket.create_server((host, port))
        except OSError as e:
            raise BindError(f"cannot listen on {host}:{port}: {e}") from e
        self._listener.settimeout(0.2)
        for target, name in (
            (self._accept_loop, "accept"),
            (self._infer_loop, "infer"),
            (self._monitor_loop, "monitor"),
        ):
            t = threading.Thread(target=target, name=name, daemon=True)
            t.start()
            self._threads.append(t)
        if self.config.stats_interval > 0:
            t = threading.Thread(target=self._stats_loop, name="stats", daemon=True)
            t.start()
            self._threads.append(t)
        return self.address

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    def stop(self) -> None:
        if self._stop.is_set():
            return
        self._stop.set()
        self.pipeline.close()
        if self._listener is not None:
            self._listener.close()
        for t in self._threads:
            t.join(timeout=2)
        with self._sessions_lock:
            sessions = list(self._sessions.values())
            self._sessions.clear()
        for s in sessions:
            s.send(wire.make_message(MsgType.BYE, s.robot_id, s.next_seq(), self.now_us()))
            s.close()
        for s in sessions:
            s.join(timeout=2)
        for t in list(self._conn_threads):
            t.join(timeout=2)
        self.stats_out(self.stats_line())

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()

    def now_us(self) -> int:
        return (self.clock_ns() - self._t0) // 1000

    def stats_line(self) -> str:
        return self.stats.pipeline.line()

    def _stats_loop(self) -> None:
        while not self._stop.wait(self.config.stats_interval):
            self.stats_out(self.stats_line())

    # --- sessions --------------------------------------------------------------

    def session(self, robot_id: str) -> RobotSession | None:
        with self._sessions_lock:
            return self._sessions.get(robot_id)

    def sessions(self) -> list[RobotSession]:
        with self._sessions_lock:
            return list(self._sessions.values())

    def accept_session(self, hello: wire.MessageHeader, conn: socket.socket) -> RobotSession:
        if hello.msg_type != MsgType.HELLO or not hello.robot_id:
            raise ValueError("first message must be a HELLO carrying a robot_id")
        with self._sessions_lock:
            if hello.robot_id in self._sessions:
                raise DuplicateSession(hello.robot_id)
            bindings = self.config.registry.bindings_for(hello.robot_id)
            session = RobotSession(hello.robot_id, conn, bindings)
            self._sessions[hello.robot_id] = session
            self.stats.robots.setdefault(hello.robot_id, RobotCounters())
            session.counters = self.stats.robots[hello.robot_id]
        return session

    def end_session(self, session: RobotSession, reply_bye: bool) -> None:
        with self._sessions_lock:
            if self._sessions.get(session.robot_id) is session:
                del self._sessions[session.robot_id]
        self.pipeline.purge_source(session.robot_id)
        if reply_bye:
            session.send(wire.make_message(MsgType.BYE, session.robot_id, session.next_seq(), self.now_us()))
        session.close()

    # --- network receive -------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.settimeout(None)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True)
            self._conn_threads.add(t)
            t.start()

    def _reject(self, conn: socket.socket, robot_id: str, status: HelloStatus) -> None:
        try:
            conn.sendall(
                wire.make_message(MsgType.HELLO, robot_id, 0, self.now_us(), wire.encode_hello_ack(status))
            )
        except (OSError, wire.EncodingError):
            pass
        conn.close()

    def _serve_conn(self, conn: socket.socket) -> None:
        decoder = wire.MessageDecoder()
        session: RobotSession | None = None
        handed_over = False  # once a session owns the socket, its sender closes it
        try:
            while not self._stop.is_set():
                try:
                    data = conn.recv(RECV_CHUNK)
                except OSError:
                    break
                if not data:
                    break
                try:
                    messages = decoder.feed(data)
                except wire.ProtocolError as e:
                    log.warning("protocol error from %s: %s", session and session.robot_id, e)
                    break
                for header, payload in messages:
                    if session is None:
                        try:
                            session = self.accept_session(header, conn)
                        except DuplicateSession:
                            self._reject(conn, header.robot_id, HelloStatus.DUPLICATE_ID)
                            return
                        except ValueError:
                            self._reject(conn, "", HelloStatus.MALFORMED)
                            return
                        handed_over = True
                        session.send(
                            wire.make_message(
                                MsgType.HELLO, session.robot_id, session.next_seq(), self.now_us(),
                                wire.encode_hello_ack(HelloStatus.OK),
                            )
                        )
                        continue
                    if header.msg_type == MsgType.BYE:
                        self.end_session(session, reply_bye=True)
                        session = None
                        return
                    if header.msg_type == MsgType.FRAME and not session.is_monitor:
                        if not self._on_frame(session, header, payload):
                            raise wire.ProtocolError("malformed frame")
        except wire.ProtocolError as e:
            log.warning("closing %s: %s", session and session.robot_id, e)
        finally:
            self._conn_threads.discard(threading.current_thread())
            if session is not None:
                self.end_session(session, reply_bye=False)
            elif not handed_over:
                conn.close()

    def _on_frame(self, session: RobotSession, header: wire.MessageHeader, payload: bytes) -> bool:
        arrival = self.clock_ns()
        try:
            fp = wire.decode_frame(payload)
        except wire.ProtocolError:
            return False
        if header.robot_id != session.robot_id:
            return False
        if session.last_seq is not None and header.seq <= session.last_seq:
            session.counters.out_of_order += 1
            return True
        session.last_seq = header.seq
        session.counters.frames += 1
        r = session.estimator.observe_arrival(arrival / 1e9)
        frame = Frame(session.robot_id, header.seq, header.timestamp_us, fp, arrival)
        self.pipeline.submit((session.robot_id, header.seq), frame, r)
        return True

    # --- inference -------------------------------------------------------------

    def _infer_loop(self) -> None:
        while not self._stop.is_set():
            entry = self.pipeline.acquire(timeout=0.1)
            if entry is None:
                continue
            frame: Frame = entry.item
            try:
                t0 = self.clock_ns()
                try:
                    dets = self.detector.detect(frame.payload)
                except Exception as e:  # a bad frame must not kill the engine
                    log.warning("detector failed on %s/%d: %s", frame.robot_id, frame.seq, e)
                    self.stats.detector_errors += 1
                    dets = []
                self.service_ns.append(self.clock_ns() - t0)
                dets = _fit_to_frame(dets, frame.payload.width, frame.payload.height)
                self.route_result(ResultPayload(frame.seq, tuple(dets)), frame.robot_id, frame)
            finally:
                self.pipeline.release()

    def route_result(self, result: ResultPayload, origin: str, frame: Frame | None = None) -> bool:
        """Send ``result`` to the session of ``origin`` only; False if it is gone."""
        session = self.session(origin)
        if session is None or not session.alive:
            self.stats.dropped_results += 1
            return False
        msg = wire.make_message(
            MsgType.RESULT, origin, session.next_seq(), self.now_us(), wire.encode_result(result)
        )
        counters = session.counters
        arrival = frame.arrival_ns if frame is not None else None

        def sent():
            counters.results += 1
            if arrival is not None:
                self.stats.pipeline.record_latency(result.frame_seq, arrival // 1000, self.clock_ns() // 1000)

        self.stats.delivered.append((origin, result.frame_seq))
        session.send(msg, sent)
        self.dispatch_action(list(result.detections), session)
        if frame is not None and self._has_monitors():
            try:
                self._monitor_q.put_nowait((frame, result.detections))
            except queue.Full:
                pass
        return True

    def dispatch_action(self, dets: list[Detection], session: RobotSession, now: float | None = None) -> list[ActionPayload]:
        """Send the action bound to the most confident bound label, unless cooling down."""
        if not session.bindings:
            return []
        now = time.monotonic() if now is None else now
        bound = [d for d in dets if d.label_id in session.bindings]
        if not bound:
            return []
        best = max(bound, key=lambda d: d.confidence)
        last = session.cooldowns.get(best.label_id)
        if last is not None and now - last < self.config.cooldown_s:
            return []
        session.cooldowns[best.label_id] = now
        action: ActionDef = self.config.registry.actions[session.bindings[best.label_id]]
        classes = self.config.classes
        label = classes[best.label_id] if best.label_id < len(classes) else str(best.label_id)
        payload = ActionPayload(
            action.action_id,
            action.render(label=label, confidence=best.confidence, x0=best.x0, y0=best.y0, x1=best.x1, y1=best.y1),
        )
        session.send(
            wire.make_message(
                MsgType.ACTION, session.robot_id, session.next_seq(), self.now_us(), wire.encode_action(payload)
            )
        )
        session.counters.actions += 1
        return [payload]

    # --- monitoring ------------------------------------------------------------

    def _has_monitors(self) -> bool:
        with self._sessions_lock:
            return any(s.is_monitor for s in self._sessions.values())

    def _monitor_loop(self) -> None:
        while not self._stop.is_set():
            try:
                frame, dets = self._monitor_q.get(timeout=0.1)
            except queue.Empty:
                continue
            monitors = [s for s in self.sessions() if s.is_monitor]
            if not monitors:
                continue
            p = frame.payload
            pixels = np.frombuffer(p.pixels, dtype=np.uint8).reshape(p.height, p.width, 3)
            drawn = overlay(pixels, dets, self.config.classes)
            body = wire.encode_monitor(frame.seq, FramePayload(p.width, p.height, drawn.tobytes()))
            for s in monitors:
                s.send(wire.make_message(MsgType.MONITOR, frame.robot_id, s.next_seq(), self.now_us(), body))


def _fit_to_frame(dets, width: int, height: int) -> list[Detection]:
    out = []
    for d in dets:
        x0, y0 = max(0, min(d.x0, width)), max(0, min(d.y0, height))
        x1, y1 = max(0, min(d.x1, width)), max(0, min(d.y1, height))
        if x1 > x0 and y1 > y0:
            conf = min(max(float(d.confidence), 0.0), 1.0)
            out.append(Detection(int(d.label_id), conf, x0, y0, x1, y1))
    return out

