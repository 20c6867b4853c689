"""Synthetic robot clients: flat-colour scenes streamed at a choppy frame rate.

Every frame carries its ground truth in the FRAME annotation block so the
oracle backend and the evaluation harness can score results exactly.
"""

from __future__ import annotations

import math
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import protocol as wire
from .evaluation import EvalRecord, Prediction, Truth
from .protocol import Box, Detection, FramePayload, HelloStatus, MsgType

DEFAULT_WIDTH, DEFAULT_HEIGHT = 640, 480


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneObject:
    label_id: int
    x: int
    y: int
    w: int
    h: int
    vx: float = 0.0  # pixels per frame
    vy: float = 0.0
    color: tuple[int, int, int] = (200, 200, 200)

    def box_at(self, index: int) -> tuple[int, int, int, int]:
        x0 = self.x + int(round(self.vx * index))
        y0 = self.y + int(round(self.vy * index))
        return x0, y0, x0 + self.w, y0 + self.h


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...] = ()
    width: int = DEFAULT_WIDTH
    height: int = DEFAULT_HEIGHT
    background: tuple[int, int, int] = (32, 32, 32)
    num_frames: int = 100_000  # frame indices valid for this scene
    num_classes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        for k, obj in enumerate(self.objects):
            if not 0 <= obj.label_id < self.num_classes:
                raise SceneError(f"object {k}: label {obj.label_id} outside class list")
            if obj.w < 1 or obj.h < 1:
                raise SceneError(f"object {k}: empty rectangle")
            # linear motion: checking both ends of the horizon covers every index
            for index in (0, self.num_frames - 1):
                x0, y0, x1, y1 = obj.box_at(index)
                if x0 < 0 or y0 < 0 or x1 > self.width or y1 > self.height:
                    raise SceneError(f"object {k} leaves the frame by index {index}")

    @property
    def crowding(self) -> int:
        return len(self.objects)

    def truth_at(self, index: int) -> list[Box]:
        return [Box(o.label_id, *o.box_at(index)) for o in self.objects]


CLASS_COLORS = [(250, 120, 20), (20, 160, 250), (120, 220, 60), (220, 60, 200), (240, 240, 90), (90, 240, 220)]


def random_scene(
    rng: np.random.Generator,
    crowding: int,
    num_frames: int,
    width: int = DEFAULT_WIDTH,
    height: int = DEFAULT_HEIGHT,
    num_classes: int = 4,
    max_speed: float = 2.0,
) -> SceneSpec:
    """Scene with ``crowding`` moving rectangles that stay in frame for ``num_frames``."""
    objects = []
    span = max(num_frames - 1, 0)
    min_side = max(8, min(width, height) // 24)
    max_side = max(min_side + 1, min(width, height) // (3 if crowding < 6 else 6))
    for _ in range(crowding):
        w = int(rng.integers(min_side, max_side))
        h = int(rng.integers(min_side, max_side))
        # keep |v| * span within the free space so the trajectory fits
        vmax_x = min(max_speed, (width - w) / span / 2) if span else 0.0
        vmax_y = min(max_speed, (height - h) / span / 2) if span else 0.0
        vx = float(rng.uniform(-vmax_x, vmax_x))
        vy = float(rng.uniform(-vmax_y, vmax_y))
        dx, dy = abs(int(round(vx * span))), abs(int(round(vy * span)))
        lo_x = dx if vx < 0 else 0
        lo_y = dy if vy < 0 else 0
        x = int(rng.integers(lo_x, width - w - (0 if vx < 0 else dx) + 1))
        y = int(rng.integers(lo_y, height - h - (0 if vy < 0 else dy) + 1))
        label = int(rng.integers(num_classes))
        objects.append(SceneObject(label, x, y, w, h, vx, vy, CLASS_COLORS[label % len(CLASS_COLORS)]))
    return SceneSpec(tuple(objects), width, height, num_frames=max(num_frames, 1), num_classes=num_classes)


def render_pixels(scene: SceneSpec, index: int) -> np.ndarray:
    if not 0 <= index < scene.num_frames:
        raise SceneError(f"frame index {index} outside [0, {scene.num_frames})")
    img = np.empty((scene.height, scene.width, 3), dtype=np.uint8)
    _fill(img, scene.background)
    for obj in scene.objects:
        x0, y0, x1, y1 = obj.box_at(index)
        _fill(img[y0:y1, x0:x1], obj.color)
    return img


def _fill(region: np.ndarray, color) -> None:
    # broadcasting one tiled row is ~40x faster than broadcasting a 3-tuple
    region[:] = np.tile(np.asarray(color, np.uint8), (region.shape[1], 1))


def render_frame(scene: SceneSpec, index: int) -> tuple[FramePayload, list[Detection]]:
    """Frame payload (with embedded truth) and the ground-truth detections."""
    img = render_pixels(scene, index)
    boxes = scene.truth_at(index)
    truth = [Detection(b.label_id, 1.0, b.x0, b.y0, b.x1, b.y1) for b in boxes]
    return FramePayload(scene.width, scene.height, img.tobytes(), annotation=tuple(boxes)), truth


@dataclass(frozen=True)
class StreamProfile:
    """Send schedule of a choppy camera feed.

    Each interval is the nominal one stretched by ``1 + U(0, jitter)``; with
    probability ``stall_prob`` a frame is followed by a gap of
    ``stall_intervals`` (drawn uniformly from the inclusive range) nominal
    intervals instead.
    """

    nominal_fps: float = 30.0
    jitter: float = 0.0
    stall_prob: float = 0.0
    stall_intervals: tuple[int, int] = (2, 6)

    def __post_init__(self):
        if self.nominal_fps <= 0 or self.jitter < 0 or not 0 <= self.stall_prob <= 1:
            raise ValueError("invalid stream profile")
        if self.stall_intervals[0] < 2 or self.stall_intervals[1] < self.stall_intervals[0]:
            raise ValueError("stalls must span at least two nominal intervals")

    def schedule(self, duration: float, rng: np.random.Generator) -> np.ndarray:
        """Send offsets in seconds, all < ``duration``."""
        period = 1.0 / self.nominal_fps
        out = []
        t = 0.0
        while t < duration - 1e-12:
            out.append(t)
            if self.stall_prob and rng.random() < self.stall_prob:
                lo, hi = self.stall_intervals
                t += period * int(rng.integers(lo, hi + 1))
            else:
                t += period * (1.0 + (rng.uniform(0, self.jitter) if self.jitter else 0.0))
        return np.asarray(out)


def frame_sequence(
    scene: SceneSpec, profile: StreamProfile, duration: float, seed: int
) -> Iterator[tuple[float, int, FramePayload, list[Detection]]]:
    """(send offset, scene index, payload, truth) for each frame of a stream."""
    for offset in profile.schedule(duration, np.random.default_rng(seed)):
        index = _scene_index(offset, profile, scene)
        payload, truth = render_frame(scene, index)
        yield float(offset), index, payload, truth


def _scene_index(offset: float, profile: StreamProfile, scene: SceneSpec) -> int:
    return min(int(round(offset * profile.nominal_fps)), scene.num_frames - 1)


# --- client ---------------------------------------------------------------------


@dataclass
class FrameRecord:
    seq: int
    t_sent_us: int
    truth: list[Detection]
    t_result_us: int | None = None
    detections: list[Detection] = field(default_factory=list)


@dataclass
class ClientReport:
    robot_id: str
    crowding: int = 0
    frames: list[FrameRecord] = field(default_factory=list)
    actions: list[tuple[int, wire.ActionPayload]] = field(default_factory=list)
    failed: bool = False
    failure: str | None = None
    disconnect_reason: str | None = None
    misrouted: int = 0  # RESULTs naming another robot or an unknown frame

    @property
    def sent(self) -> int:
        return len(self.frames)

    @property
    def results(self) -> int:
        return sum(f.t_result_us is not None for f in self.frames)

    def latencies_us(self) -> list[int]:
        return [f.t_result_us - f.t_sent_us for f in self.frames if f.t_result_us is not None]


def _read_message(sock: socket.socket, decoder: wire.MessageDecoder, pending: list):
    while not pending:
        data = sock.recv(1 << 16)
        if not data:
            return None
        pending.extend(decoder.feed(data))
    return pending.pop(0)


def run_client(
    profile: StreamProfile,
    scene: SceneSpec,
    addr: tuple[str, int],
    duration: float,
    robot_id: str = "robot-0",
    seed: int = 0,
    time_scale: float = 1.0,
    drain_timeout: float = 0.5,
    connect_timeout: float = 5.0,
    start_delay: float = 0.0,
) -> ClientReport:
    """Stream ``duration`` seconds of frames to a gateway and record what comes back.

    ``time_scale`` > 1 compresses wall-clock time (the stream's timestamps are
    unchanged). After the last frame the client waits until every frame has a
    result or ``drain_timeout`` passes without one, then says BYE.
    """
    report = ClientReport(robot_id, crowding=scene.crowding)
    clock = time.perf_counter_ns
    try:
        sock = socket.create_connection(addr, timeout=connect_timeout)
    except OSError as e:
        report.failed, report.failure = True, f"connect failed: {e}"
        return report
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    decoder = wire.MessageDecoder()
    pending: list = []
    try:
        sock.sendall(wire.make_message(MsgType.HELLO, robot_id, 0, 0))
        msg = _read_message(sock, decoder, pending)
        if msg is None or msg[0].msg_type != MsgType.HELLO:
            report.failed, report.failure = True, "no HELLO acknowledgement"
            sock.close()
            return report
        status = wire.decode_hello_ack(msg[1])
        if status != HelloStatus.OK:
            report.failed, report.failure = True, f"rejected: {status.name}"
            sock.close()
            return report
    except (OSError, wire.ProtocolError) as e:
        report.failed, report.failure = True, f"handshake failed: {e}"
        sock.close()
        return report
    sock.settimeout(None)

    by_seq: dict[int, FrameRecord] = {}
    lock = threading.Lock()
    progress = threading.Condition(lock)
    t0 = clock()

    def receive():
        try:
            for header, payload in pending:
                handle(header, payload)
            while True:
                data = sock.recv(1 << 16)
                if not data:
                    report.disconnect_reason = report.disconnect_reason or "connection closed"
                    return
                for header, payload in decoder.feed(data):
                    if handle(header, payload):
                        return
        except (OSError, wire.ProtocolError) as e:
            report.disconnect_reason = report.disconnect_reason or f"receive error: {e}"
        finally:
            with progress:
                progress.notify_all()

    def handle(header, payload) -> bool:
        now = (clock() - t0) // 1000
        if header.msg_type == MsgType.RESULT:
            result = wire.decode_result(payload)
            with progress:
                rec = by_seq.get(result.frame_seq)
                if header.robot_id != robot_id or rec is None or rec.t_result_us is not None:
                    report.misrouted += 1
                else:
                    rec.t_result_us = now
                    rec.detections = list(result.detections)
                progress.notify_all()
        elif header.msg_type == MsgType.ACTION:
            report.actions.append((now, wire.decode_action(payload)))
        elif header.msg_type == MsgType.BYE:
            report.disconnect_reason = "gateway said BYE"
            return True
        return False

    receiver = threading.Thread(target=receive, name=f"recv-{robot_id}", daemon=True)
    receiver.start()
    if start_delay:
        time.sleep(start_delay)
    start = clock()
    seq = 0
    try:
        # render at capture time, like a camera, rather than ahead of schedule:
        # on a shared CPU, pre-rendering would compete with the gateway
        for offset in profile.schedule(duration, np.random.default_rng(seed)):
            wait = start + offset / time_scale * 1e9 - clock()
            if wait > 0:
                time.sleep(wait / 1e9)
            payload, truth = render_frame(scene, _scene_index(offset, profile, scene))
            seq += 1
            msg = wire.make_message(MsgType.FRAME, robot_id, seq, int(offset * 1e6), wire.encode_frame(payload))
            rec = FrameRecord(seq, (clock() - t0) // 1000, truth)
            with progress:
                by_seq[seq] = rec
                report.frames.append(rec)
            sock.sendall(msg)
        with progress:
            last_count = -1
            while receiver.is_alive():
                done = sum(f.t_result_us is not None for f in report.frames)
                if done == len(report.frames):
                    break
                if done == last_count:
                    break  # nothing arrived during a whole drain window
                last_count = done
                progress.wait(drain_timeout)
        sock.sendall(wire.make_message(MsgType.BYE, robot_id, seq + 1, 0))
        receiver.join(timeout=2.0)
    except OSError as e:
        report.disconnect_reason = report.disconnect_reason or f"send failed: {e}"
    finally:
        sock.close()
        receiver.join(timeout=1.0)
    return report


# --- report files --------------------------------------------------------------

REPORT_HEADER = """\
# infergate simulator report v1
# '@ <robot_id> crowding <k>' starts a robot section
# record: <seq> <t_sent_us> <t_result_us|-1> <n_truth> <n_detected>
# followed by n_truth 'T label x0 y0 x1 y1' and n_detected 'P label conf x0 y0 x1 y1' lines
"""


def write_report(reports: Sequence[ClientReport], path: str | Path) -> None:
    lines = [REPORT_HEADER.rstrip("\n")]
    for rep in reports:
        lines.append(f"@ {rep.robot_id} crowding {rep.crowding}")
        for f in rep.frames:
            t_res = -1 if f.t_result_us is None else f.t_result_us
            lines.append(f"{f.seq} {f.t_sent_us} {t_res} {len(f.truth)} {len(f.detections)}")
            lines += [f"T {d.label_id} {d.x0} {d.y0} {d.x1} {d.y1}" for d in f.truth]
            lines += [
                f"P {d.label_id} {d.confidence:.6g} {d.x0} {d.y0} {d.x1} {d.y1}" for d in f.detections
            ]
    Path(path).write_text("\n".join(lines) + "\n")


class ReportFormatError(ValueError):
    pass


def read_records(path: str | Path, include_undelivered: bool = False) -> list[EvalRecord]:
    """Parse a report into evaluation records.

    Frames that never got a result were dropped by the gateway, not missed by
    the detector, so by default they are left out.
    """
    records = []
    robot, crowding = None, 0
    lines = Path(path).read_text().splitlines()
    i = 0

    def fail(msg):
        raise ReportFormatError(f"{path}:{i + 1}: {msg}")

    while i < len(lines):
        line = lines[i].strip()
        if not line or line.startswith("#"):
            i += 1
            continue
        parts = line.split()
        if parts[0] == "@":
            if len(parts) != 4 or parts[2] != "crowding":
                fail("bad robot section line")
            robot, crowding = parts[1], int(parts[3])
            i += 1
            continue
        if robot is None or len(parts) != 5:
            fail(f"unexpected line {line!r}")
        seq, t_sent, t_res, n_t, n_p = (int(p) for p in parts)
        truths, preds = [], []
        try:
            for k in range(n_t):
                tp = lines[i + 1 + k].split()
                if tp[0] != "T":
                    raise ValueError
                truths.append(Truth(int(tp[1]), tuple(int(v) for v in tp[2:6])))
            for k in range(n_p):
                pp = lines[i + 1 + n_t + k].split()
                if pp[0] != "P":
                    raise ValueError
                preds.append(Prediction(int(pp[1]), float(pp[2]), tuple(int(v) for v in pp[3:7])))
        except (ValueError, IndexError):
            fail("truth/prediction block does not match the record counts")
        if t_res >= 0 or include_undelivered:
            latency = t_res - t_sent if t_res >= 0 else None
            records.append(EvalRecord((robot, seq), truths, preds, latency, crowding))
        i += 1 + n_t + n_p
    return records


def to_records(reports: Sequence[ClientReport]) -> list[EvalRecord]:
    out = []
    for rep in reports:
        for f in rep.frames:
            if f.t_result_us is None:
                continue
            out.append(
                EvalRecord(
                    (rep.robot_id, f.seq),
                    [Truth(d.label_id, (d.x0, d.y0, d.x1, d.y1)) for d in f.truth],
                    [Prediction(d.label_id, d.confidence, (d.x0, d.y0, d.x1, d.y1)) for d in f.detections],
                    f.t_result_us - f.t_sent_us,
                    rep.crowding,
                )
            )
    return out


def run_robots(
    addr: tuple[str, int],
    robots: int,
    fps: float,
    duration: float,
    crowding: int,
    seed: int,
    profile: StreamProfile | None = None,
    time_scale: float = 1.0,
    prefix: str = "robot",
    stagger: bool = True,
) -> list[ClientReport]:
    """Run ``robots`` clients concurrently, each in its own thread."""
    profile = profile or StreamProfile(nominal_fps=fps)
    n_frames = int(math.ceil(duration * profile.nominal_fps)) + 2
    reports: list[ClientReport | None] = [None] * robots
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0, 1.0 / profile.nominal_fps / time_scale, robots) if stagger else np.zeros(robots)

    def one(k):
        scene = random_scene(np.random.default_rng([seed, k]), crowding, n_frames)
        reports[k] = run_client(
            profile, scene, addr, duration, f"{prefix}-{k}", seed=seed * 1000 + k,
            time_scale=time_scale, start_delay=float(phases[k]),
        )

    threads = [threading.Thread(target=one, args=(k,)) for k in range(robots)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return reports  # type: ignore[return-value]
