import random
import socket
import threading
import time

import numpy as np
import pytest

from infergate import protocol as wire
from infergate.config import GatewayConfig, parse_config
from infergate.detect import OracleDetector, ServiceTimeDetector
from infergate.gateway import BindError, Gateway, RobotSession
from infergate.monitor import PALETTE
from infergate.protocol import Box, Detection, FramePayload, HelloStatus, MsgType, ResultPayload

W, H = 64, 48


class Client:
    def __init__(self, addr, robot_id):
        self.robot_id = robot_id
        self.sock = socket.create_connection(addr, timeout=5)
        self.dec = wire.MessageDecoder()
        self.pending = []

    def hello(self):
        self.sock.sendall(wire.make_message(MsgType.HELLO, self.robot_id, 0, 0))
        header, payload = self.read()
        assert header.msg_type == MsgType.HELLO
        return wire.decode_hello_ack(payload)

    def frame(self, seq, boxes=(Box(1, 4, 4, 20, 20),)):
        fp = FramePayload(W, H, bytes(W * H * 3), annotation=tuple(boxes))
        self.sock.sendall(wire.make_message(MsgType.FRAME, self.robot_id, seq, seq * 1000, wire.encode_frame(fp)))

    def bye(self):
        self.sock.sendall(wire.make_message(MsgType.BYE, self.robot_id, 0, 0))

    def read(self, timeout=5.0):
        self.sock.settimeout(timeout)
        while not self.pending:
            data = self.sock.recv(1 << 16)
            if not data:
                return None
            self.pending += self.dec.feed(data)
        return self.pending.pop(0)

    def read_type(self, kind, timeout=5.0):
        while True:
            m = self.read(timeout)
            if m is None or m[0].msg_type == kind:
                return m

    def close(self):
        self.sock.close()


def make_gateway(detector=None, config=None, lines=None):
    cfg = config or GatewayConfig(listen="127.0.0.1:0")
    out = lines if lines is not None else []
    return Gateway(cfg, detector or OracleDetector(), stats_out=out.append)


def wait_for(pred, timeout=5.0):
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        if pred():
            return True
        time.sleep(0.01)
    return False


def test_round_trip():
    lines = []
    with make_gateway(lines=lines) as gw:
        c = Client(gw.address, "nao-1")
        assert c.hello() is HelloStatus.OK
        c.frame(1)
        header, payload = c.read_type(MsgType.RESULT)
        assert header.robot_id == "nao-1"
        res = wire.decode_result(payload)
        assert res.frame_seq == 1
        assert res.detections == (Detection(1, 1.0, 4, 4, 20, 20),)
        c.close()
    assert lines and lines[-1].split()[:3] == ["1", "1", "0"]


def test_three_sessions_and_duplicate_rejected():
    with make_gateway() as gw:
        clients = [Client(gw.address, f"nao-{k}") for k in range(3)]
        assert all(c.hello() is HelloStatus.OK for c in clients)
        assert sorted(s.robot_id for s in gw.sessions()) == ["nao-0", "nao-1", "nao-2"]
        dup = Client(gw.address, "nao-1")
        assert dup.hello() is HelloStatus.DUPLICATE_ID
        assert dup.read() is None  # connection closed
        assert len(gw.sessions()) == 3
        for c in clients:
            c.close()


def test_first_message_must_be_hello():
    with make_gateway() as gw:
        c = Client(gw.address, "x")
        c.frame(1)
        header, payload = c.read()
        assert wire.decode_hello_ack(payload) is HelloStatus.MALFORMED
        assert c.read() is None


def test_garbage_closes_connection():
    with make_gateway() as gw:
        c = Client(gw.address, "x")
        assert c.hello() is HelloStatus.OK
        c.sock.sendall(b"JUNK" + bytes(60))
        assert c.read_type(MsgType.RESULT) is None
        assert wait_for(lambda: not gw.sessions())


def test_bye_tears_down_and_purges_queue():
    slow = ServiceTimeDetector(OracleDetector(), 0.2)
    with make_gateway(slow) as gw:
        a = Client(gw.address, "a")
        b = Client(gw.address, "b")
        a.hello(), b.hello()
        for seq in range(1, 5):
            a.frame(seq)
        assert wait_for(lambda: gw.stats.pipeline.frames_in == 4)
        a.bye()
        assert a.read_type(MsgType.BYE) is not None
        assert wait_for(lambda: gw.session("a") is None)
        assert gw.stats.dropped_for("a") == 3  # everything still queued behind frame 1
        assert [s.robot_id for s in gw.sessions()] == ["b"]
        b.frame(1)
        assert wire.decode_result(b.read_type(MsgType.RESULT)[1]).frame_seq == 1
        a.close(), b.close()


@pytest.mark.parametrize("seed", range(3))
def test_routing_over_random_interleavings(seed):
    rng = random.Random(seed)
    with make_gateway() as gw:
        clients = {r: Client(gw.address, r) for r in ("A", "B", "C")}
        for c in clients.values():
            c.hello()
        seqs = {r: 0 for r in clients}
        order = [rng.choice("ABC") for _ in range(30)]
        got = {r: [] for r in clients}
        for r in order:
            seqs[r] += 1
            # distinct box per robot so content proves the routing too
            box = Box(0, 1 + "ABC".index(r), 1, 10 + seqs[r], 10)
            clients[r].frame(seqs[r], (box,))
            header, payload = clients[r].read_type(MsgType.RESULT)
            res = wire.decode_result(payload)
            assert header.robot_id == r
            assert res.frame_seq == seqs[r]
            assert res.detections[0].x0 == 1 + "ABC".index(r)
            assert res.detections[0].x1 == 10 + seqs[r]
            got[r].append(res.frame_seq)
        for r, c in clients.items():
            assert got[r] == list(range(1, seqs[r] + 1))
            c.close()


def test_result_for_departed_robot_is_counted():
    with make_gateway() as gw:
        assert gw.route_result(ResultPayload(3, ()), "ghost") is False
        assert gw.stats.dropped_results == 1


def test_single_session_gets_everything():
    with make_gateway() as gw:
        c = Client(gw.address, "solo")
        c.hello()
        for seq in range(1, 11):
            c.frame(seq)
            assert wire.decode_result(c.read_type(MsgType.RESULT)[1]).frame_seq == seq
        c.close()


CFG = """\
listen = 127.0.0.1:0
classes = ball, cup, bottle
cooldown_s = 2

[actions]
kick = 7, target={label}

[bindings.*]
ball = kick
"""


def _session(gw, robot="r"):
    a, b = socket.socketpair()
    s = RobotSession(robot, a, gw.config.registry.bindings_for(robot))
    return s, b


def test_dispatch_highest_confidence_bound_label():
    gw = make_gateway(config=parse_config(CFG))
    s, peer = _session(gw)
    sent = gw.dispatch_action([Detection(0, 0.9, 0, 0, 1, 1), Detection(1, 0.95, 0, 0, 1, 1)], s, now=10.0)
    assert [(p.action_id, p.args) for p in sent] == [(7, "target=ball")]
    assert gw.dispatch_action([Detection(1, 0.9, 0, 0, 1, 1)], s, now=10.5) == []  # unbound label
    assert gw.dispatch_action([Detection(0, 0.9, 0, 0, 1, 1)], s, now=11.0) == []  # cooling down
    assert len(gw.dispatch_action([Detection(0, 0.9, 0, 0, 1, 1)], s, now=12.5)) == 1
    s.close(), s.join(1)
    peer.settimeout(1)
    msgs = wire.MessageDecoder().feed(peer.recv(1 << 16))
    assert [h.msg_type for h, _ in msgs] == [MsgType.ACTION, MsgType.ACTION]
    peer.close()


def test_action_arrives_over_the_wire():
    cfg = parse_config(CFG)
    with make_gateway(config=cfg) as gw:
        c = Client(gw.address, "r")
        c.hello()
        c.frame(1, (Box(0, 1, 1, 9, 9),))
        kinds = [c.read()[0].msg_type for _ in range(2)]
        assert kinds == [MsgType.RESULT, MsgType.ACTION]
        c.frame(2, (Box(0, 1, 1, 9, 9),))
        assert c.read()[0].msg_type == MsgType.RESULT
        assert gw.session("r").counters.actions == 1  # second one within cooldown
        c.close()


def test_monitor_stream_matches_results():
    with make_gateway() as gw:
        mon = Client(gw.address, "mon-1")
        mon.hello()
        c = Client(gw.address, "nao")
        c.hello()
        c.frame(5, (Box(3, 10, 12, 40, 30),))
        res = wire.decode_result(c.read_type(MsgType.RESULT)[1])
        header, payload = mon.read_type(MsgType.MONITOR)
        seq, fp = wire.decode_monitor(payload)
        assert header.robot_id == "nao" and seq == 5
        px = np.frombuffer(fp.pixels, np.uint8).reshape(fp.height, fp.width, 3)
        ys, xs = np.nonzero(np.all(px == PALETTE[3], axis=2))
        (d,) = res.detections
        assert (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1) == (d.x0, d.y0, d.x1, d.y1)
        mon.close(), c.close()


def test_stalled_client_does_not_block_others():
    with make_gateway() as gw:
        stalled = Client(gw.address, "stalled")
        stalled.hello()
        stalled.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 4096)
        mon = Client(gw.address, "mon-x")  # never reads: large MONITOR frames pile up
        mon.hello()
        ok = Client(gw.address, "ok")
        ok.hello()
        for seq in range(1, 40):
            stalled.frame(seq)
        for seq in range(1, 20):
            ok.frame(seq)
            assert wire.decode_result(ok.read_type(MsgType.RESULT, timeout=5)[1]).frame_seq == seq
        for c in (stalled, mon, ok):
            c.close()


def test_second_gateway_on_same_port_fails():
    with make_gateway() as gw:
        host, port = gw.address
        other = make_gateway(config=GatewayConfig(listen=f"{host}:{port}"))
        with pytest.raises(BindError):
            other.start()


def test_stop_says_bye_and_prints_stats():
    lines = []
    gw = make_gateway(lines=lines)
    gw.start()
    c = Client(gw.address, "r")
    c.hello()
    gw.stop()
    assert c.read_type(MsgType.BYE) is not None
    assert len(lines) == 1 and len(lines[0].split()) == 5


def test_periodic_stats_lines():
    lines = []
    gw = make_gateway(config=GatewayConfig(listen="127.0.0.1:0", stats_interval=0.05), lines=lines)
    with gw:
        assert wait_for(lambda: len(lines) >= 2)


def test_overload_drops_are_attributed_and_counted():
    slow = ServiceTimeDetector(OracleDetector(), 0.05)
    with make_gateway(slow) as gw:
        c = Client(gw.address, "r")
        c.hello()
        results = []

        def reader():
            try:
                while (m := c.read_type(MsgType.RESULT, timeout=2)) is not None:
                    results.append(wire.decode_result(m[1]).frame_seq)
            except TimeoutError:
                pass

        th = threading.Thread(target=reader)
        th.start()
        # 60 fps against a 20 fps engine: the queue reaches max(5, 60) within ~2 s
        for seq in range(1, 151):
            c.frame(seq)
            time.sleep(1 / 60)
        th.join(timeout=15)
        s = gw.stats.pipeline
        assert s.frames_in == 150
        assert s.frames_dropped > 0
        assert gw.stats.dropped_for("r") == 150 - len(results)
        assert results == sorted(results)
        c.close()


def test_simulated_client_duration_zero():
    from infergate.sim import SceneSpec, StreamProfile, run_client

    with make_gateway() as gw:
        rep = run_client(StreamProfile(10), SceneSpec(), gw.address, 0.0, robot_id="z")
        assert not rep.failed and rep.sent == 0 and rep.results == 0
        assert wait_for(lambda: gw.session("z") is None)
        assert gw.stats.pipeline.frames_in == 0


def test_simulated_client_gets_exact_truth():
    from infergate.sim import StreamProfile, random_scene, run_client

    scene = random_scene(np.random.default_rng(2), 4, 101)
    with make_gateway() as gw:
        # 10 s of stream compressed 10x in wall-clock time
        rep = run_client(StreamProfile(10), scene, gw.address, 10.0, robot_id="t", time_scale=10)
    assert rep.sent == 100 and rep.results == 100 and rep.misrouted == 0
    for f in rep.frames:
        assert f.detections == f.truth
