import asyncio
import json
import math
import os
import signal
import subprocess
import sys
import time

import pytest

from harness import GRID, GRID_APP, HOME, RADIUS_APP, Client, HeldSource, make_fix, policy_doc, running
from privgps.daemon import ClientSession, LocationDaemon
from privgps.geo import GeoPoint, GridSpec, cell_of, displace, haversine_m
from privgps.mechanisms import CoinPair, RandomSource
from privgps.policy import EffectiveConfig, SubscribeRequest, clamp, load_policies, resolve


def arun(coro):
    return asyncio.run(asyncio.wait_for(coro, 60))


def test_radius_happy_path():
    async def go():
        async with running(policy_doc({"maps": {**RADIUS_APP, "min_radius_m": 300}})) as d:
            c = await Client.connect(d.port)
            ack = await c.subscribe("maps", epoch_ms=200, radius_m=100)
            assert ack == {"type": "ACK", "mode": "radius", "epoch_ms": 200, "radius_m": 300}
            reports = [await c.recv() for _ in range(5)]
            await c.close()
            return reports
    reports = arun(go())
    assert [r["seq"] for r in reports] == [1, 2, 3, 4, 5]
    for r in reports:
        assert r["mode"] == "radius"
        assert haversine_m(GeoPoint(r["lat"], r["lon"]), HOME) <= 300 * 1.001


def test_report_schedule_is_fixed_cadence():
    async def go():
        async with running(policy_doc({"maps": RADIUS_APP})) as d:
            c = await Client.connect(d.port)
            loop = asyncio.get_running_loop()
            await c.subscribe("maps", epoch_ms=250)
            t0 = loop.time()
            times = []
            for _ in range(6):
                await c.recv()
                times.append(loop.time() - t0)
            await c.close()
            return times
    times = arun(go())
    for k, t in enumerate(times, 1):
        assert t == pytest.approx(0.25 * k, abs=0.06)


def test_capacity():
    async def go():
        async with running(policy_doc({"maps": RADIUS_APP}), max_clients=64) as d:
            clients = [await Client.connect(d.port) for _ in range(64)]
            await asyncio.sleep(0.1)
            extra = await Client.connect(d.port)
            refusal = await extra.recv()
            closed = await extra.recv()
            # existing sessions still work
            ack = await clients[0].subscribe("maps", epoch_ms=200)
            for c in clients + [extra]:
                await c.close()
            return refusal, closed, ack
    refusal, closed, ack = arun(go())
    assert refusal["type"] == "ERROR" and refusal["code"] == "CAPACITY"
    assert closed is None
    assert ack["type"] == "ACK"


def test_denied_and_bad_request():
    async def go():
        async with running(policy_doc({"blocked": {"mode": "deny"}})) as d:
            out = []
            for msg in ({"type": "SUBSCRIBE", "app_id": "blocked"},
                        {"type": "SUBSCRIBE", "app_id": "anyone"},
                        {"type": "SUBSCRIBE"},
                        {"type": "SUBSCRIBE", "app_id": "x", "epoch_ms": -5},
                        {"type": "POLL"},
                        {"type": "DANCE"}):
                c = await Client.connect(d.port)
                await c.send(msg)
                out.append((await c.recv())["code"])
                await c.close()
            c = await Client.connect(d.port)
            await c.send(b"{not json\n")
            out.append((await c.recv())["code"])
            await c.close()
            return out
    assert arun(go()) == ["DENIED", "DENIED", "BAD_REQUEST", "BAD_REQUEST", "BAD_REQUEST", "BAD_REQUEST",
                          "BAD_REQUEST"]


def test_oversize_line_rejected():
    async def go():
        async with running(policy_doc({"maps": RADIUS_APP})) as d:
            c = await Client.connect(d.port)
            await c.send(b"x" * (70 * 1024) + b"\n")
            reply = await c.recv()
            await c.close()
            return reply
    assert arun(go())["code"] == "BAD_REQUEST"


def test_already_subscribed_and_rate_limited_keep_schedule():
    async def go():
        async with running(policy_doc({"maps": RADIUS_APP})) as d:
            loop = asyncio.get_running_loop()
            c = await Client.connect(d.port)
            await c.subscribe("maps", epoch_ms=400)
            t0 = loop.time()
            await c.send({"type": "SUBSCRIBE", "app_id": "maps", "epoch_ms": 400})
            again = await c.recv()
            await c.send({"type": "POLL"})
            limited = await c.recv()
            first = await c.recv()
            t1 = loop.time() - t0
            second = await c.recv()
            t2 = loop.time() - t0
            await c.close()
            return again, limited, first, t1, second, t2
    again, limited, first, t1, second, t2 = arun(go())
    assert again["code"] == "ALREADY_SUBSCRIBED"
    assert limited["code"] == "RATE_LIMITED"
    assert first["seq"] == 1 and second["seq"] == 2
    assert t1 == pytest.approx(0.4, abs=0.08)
    assert t2 == pytest.approx(0.8, abs=0.08)


@pytest.mark.parametrize("overrequest", [
    {"type": "POLL"},
    {"type": "SUBSCRIBE", "app_id": "maps", "epoch_ms": 200},
])
def test_three_violations_close_connection(overrequest):
    async def go():
        async with running(policy_doc({"maps": RADIUS_APP})) as d:
            c = await Client.connect(d.port)
            await c.subscribe("maps", epoch_ms=5000)
            replies = []
            for _ in range(3):
                await c.send(overrequest)
                replies.append(await c.recv())
            tail = await c.recv()
            await c.close()
            await asyncio.sleep(0.05)
            return replies, tail, d.n_connections
    replies, tail, remaining = arun(go())
    assert [r["code"] for r in replies] == ["RATE_LIMITED"] * 3
    assert tail is None
    assert remaining == 0


def test_violations_outside_window_do_not_close():
    async def go():
        async with running(policy_doc({"maps": RADIUS_APP})) as d:
            c = await Client.connect(d.port)
            await c.subscribe("maps", epoch_ms=200)
            codes = []
            for _ in range(4):
                await c.send({"type": "POLL"})
                while True:
                    m = await c.recv()
                    if m["type"] == "ERROR":
                        codes.append(m["code"])
                        break
                await asyncio.sleep(0.25)
            await c.close()
            return codes
    assert arun(go()) == ["RATE_LIMITED"] * 4


def test_radius_zero_reports_exact_fix():
    async def go():
        async with running(policy_doc({"maps": RADIUS_APP})) as d:
            c = await Client.connect(d.port)
            await c.subscribe("maps", epoch_ms=200, radius_m=0)
            r = await c.recv()
            await c.close()
            return r
    r = arun(go())
    assert (r["lat"], r["lon"]) == (HOME.lat_deg, HOME.lon_deg)


def test_grid_p1_is_one_hot_of_current_cell():
    grid = GridSpec.from_dict(GRID)
    s = _session(3, 1)
    s.effective = EffectiveConfig("grid", 200, coins=CoinPair(1.0, 0.5), grid=grid)
    expect = [0] * 9
    expect[cell_of(HOME, grid)] = 1
    for _ in range(20):
        assert s.tick(make_fix(), 0, 0)["cells"] == expect
    outside = s.tick(make_fix(GeoPoint(10.0, 10.0)), 0, 0)
    assert outside["cells"] == [0] * 9


def test_grid_reports_over_the_wire():
    async def go():
        async with running(policy_doc({"t": GRID_APP})) as d:
            c = await Client.connect(d.port)
            await c.subscribe("t", epoch_ms=200)
            r = await c.recv()
            await c.close()
            return r
    r = arun(go())
    assert r["mode"] == "grid" and len(r["cells"]) == 9 and set(r["cells"]) <= {0, 1}


def test_unrepresentable_budget_rejected_at_load():
    with pytest.raises(ValueError):
        load_policies(policy_doc({"t": {**GRID_APP, "max_epsilon": 50.0}}))


def test_grid_ack_reports_clamped_epsilon():
    async def go():
        async with running(policy_doc({"t": GRID_APP})) as d:
            c = await Client.connect(d.port)
            ack = await c.subscribe("t", epsilon=3.0)
            await c.close()
            return ack
    ack = arun(go())
    assert ack["epsilon"] == pytest.approx(1.0, abs=1e-9)
    assert ack["coins"]["p"] == pytest.approx(math.tanh(0.5))
    assert ack["grid"] == GRID


def test_region_gate_suppresses_without_seq():
    inside = {"min_lat": 34.0, "min_lon": -118.5, "max_lat": 34.2, "max_lon": -118.3}
    src = HeldSource(make_fix(GeoPoint(35.0, -118.4)))
    async def go():
        async with running(policy_doc({"maps": {**RADIUS_APP, "allowed_region": inside}}), src) as d:
            c = await Client.connect(d.port)
            await c.subscribe("maps", epoch_ms=200)
            with pytest.raises(asyncio.TimeoutError):
                await c.recv(timeout=0.7)
            src.fix = make_fix()
            r = await c.recv()
            await c.close()
            return r
    assert arun(go())["seq"] == 1


def test_stale_fix_reports_stale():
    src = HeldSource()
    async def go():
        async with running(policy_doc({"maps": RADIUS_APP}), src) as d:
            c = await Client.connect(d.port)
            await c.subscribe("maps", epoch_ms=200)
            fresh = await c.recv()
            src.fix = None
            msgs = [await c.recv() for _ in range(4)]
            await c.close()
            return fresh, msgs
    fresh, msgs = arun(go())
    assert fresh["mode"] == "radius"
    # the fix ages past two epochs after at most three more releases
    assert msgs[-1] == {"type": "REPORT", "seq": 5, "mode": "stale", "ts_ms": msgs[-1]["ts_ms"]}
    assert "lat" not in msgs[-1]


def test_no_fix_yet_is_stale():
    async def go():
        src = HeldSource()
        src.fix = None
        async with running(policy_doc({"maps": RADIUS_APP}), src) as d:
            c = await Client.connect(d.port)
            await c.subscribe("maps", epoch_ms=200)
            r = await c.recv()
            await c.close()
            return r
    assert arun(go())["mode"] == "stale"


def _session(seed, counter, coins=CoinPair(0.5, 0.5)):
    store = load_policies(policy_doc({"t": {**GRID_APP, "max_epsilon": 20}}))
    req = SubscribeRequest("t", 200, None, None, coins)
    return ClientSession("t", req, clamp(req, resolve(store, "t")), RandomSource.for_session(seed, counter), 0.0)


def test_session_streams_are_isolated():
    fix = make_fix()
    a, b = _session(7, 1), _session(7, 2)
    alone = [_session(7, 1).tick(fix, 0, 0)["cells"] for _ in range(1)]
    seq_a = [a.tick(fix, 0, 0)["cells"] for _ in range(50)]
    seq_b = [b.tick(fix, 0, 0)["cells"] for _ in range(50)]
    assert seq_a != seq_b
    # interleaving with another session does not perturb a stream
    a2, b2 = _session(7, 1), _session(7, 2)
    inter = []
    for _ in range(50):
        inter.append(a2.tick(fix, 0, 0)["cells"])
        b2.tick(fix, 0, 0)
    assert inter == seq_a and inter[0] == alone[0]


def test_session_tick_advances_schedule():
    s = _session(1, 1)
    s.tick(make_fix(), 0, 0)
    s.tick(None, None, 0)
    assert s.next_release_ms == 400 and s.epoch_seq == 2


def test_seeded_daemon_is_reproducible():
    async def go():
        out = []
        for _ in range(2):
            async with running(policy_doc({"maps": RADIUS_APP}), seed=99) as d:
                c = await Client.connect(d.port)
                await c.subscribe("maps", epoch_ms=200, radius_m=500)
                r = await c.recv()
                out.append((r["lat"], r["lon"]))
                await c.close()
        return out
    a, b = arun(go())
    assert a == b


def test_reload_tightens_epoch_at_next_boundary():
    async def go():
        async with running(policy_doc({"maps": RADIUS_APP})) as d:
            loop = asyncio.get_running_loop()
            c = await Client.connect(d.port)
            await c.subscribe("maps", epoch_ms=200)
            t0 = loop.time()
            await c.recv()
            assert d.reload_policies(policy_doc({"maps": {**RADIUS_APP, "min_epoch_ms": 600}}))
            second = await c.recv()
            t_second = loop.time() - t0
            ack = await c.recv()
            third = await c.recv()
            t_third = loop.time() - t0
            await c.close()
            return second, t_second, ack, third, t_third
    second, t_second, ack, third, t_third = arun(go())
    assert second["seq"] == 2 and t_second == pytest.approx(0.4, abs=0.08)
    assert ack == {"type": "ACK", "mode": "radius", "epoch_ms": 600, "radius_m": 0}
    assert third["seq"] == 3 and t_third == pytest.approx(1.0, abs=0.08)


def test_reload_to_deny_closes_session():
    async def go():
        async with running(policy_doc({"maps": RADIUS_APP})) as d:
            c = await Client.connect(d.port)
            await c.subscribe("maps", epoch_ms=200)
            await c.recv()
            d.reload_policies(policy_doc({"maps": {"mode": "deny"}}))
            msgs = []
            while (m := await c.recv()) is not None:
                msgs.append(m)
            return msgs
    msgs = arun(go())
    assert msgs[-1]["code"] == "DENIED"


def test_invalid_reload_keeps_previous_store():
    async def go():
        async with running(policy_doc({"maps": RADIUS_APP})) as d:
            before = d.store
            assert not d.reload_policies('{"default": {"mode": "radius"}, "apps": {}')
            assert not d.reload_policies('{"apps": {}}')
            assert d.store is before and d.store_version == 0
            c = await Client.connect(d.port)
            ack = await c.subscribe("maps", epoch_ms=200)
            await c.close()
            return ack
    assert arun(go())["type"] == "ACK"


@pytest.mark.parametrize("host", ["0.0.0.0", "192.168.1.10", "::", "example.com"])
def test_refuses_non_loopback(host):
    with pytest.raises(ValueError):
        LocationDaemon(load_policies(policy_doc()), HeldSource(), host=host)


def test_disconnect_frees_slot():
    async def go():
        async with running(policy_doc({"maps": RADIUS_APP}), max_clients=1) as d:
            c = await Client.connect(d.port)
            await c.subscribe("maps", epoch_ms=200)
            await c.send({"type": "UNSUBSCRIBE"})
            assert await c.recv() is None
            await asyncio.sleep(0.05)
            c2 = await Client.connect(d.port)
            ack = await c2.subscribe("maps", epoch_ms=200)
            await c2.close()
            return ack
    assert arun(go())["type"] == "ACK"


def _spawn_daemon(tmp_path, doc, *extra):
    pol = tmp_path / "policy.json"
    pol.write_text(doc)
    proc = subprocess.Popen(
        [sys.executable, "-m", "privgps", "daemon", "--port", "0", "--policy", str(pol),
         "--source", "synthetic:34.06,-118.44;34.07,-118.44", *extra],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
    )
    line = proc.stdout.readline()
    assert line.startswith("listening on 127.0.0.1:"), proc.stderr.read()
    return proc, int(line.rsplit(":", 1)[1]), pol


@pytest.mark.parametrize("sig", [signal.SIGINT, signal.SIGTERM])
def test_cli_daemon_clean_shutdown(tmp_path, sig):
    proc, port, _ = _spawn_daemon(tmp_path, policy_doc({"maps": RADIUS_APP}))
    try:
        async def go():
            c = await Client.connect(port)
            ack = await c.subscribe("maps", epoch_ms=200)
            r = await c.recv()
            proc.send_signal(sig)
            tail = await c.recv(timeout=5)
            return ack, r, tail
        ack, r, tail = arun(go())
        assert ack["type"] == "ACK" and r["type"] == "REPORT" and tail is None
        assert proc.wait(10) == 0
    finally:
        proc.kill()


def test_cli_daemon_sigusr1_reload(tmp_path):
    proc, port, pol = _spawn_daemon(tmp_path, policy_doc({"maps": RADIUS_APP}), "--reload-signal")
    try:
        pol.write_text(policy_doc({"maps": {**RADIUS_APP, "min_epoch_ms": 700}}))
        proc.send_signal(signal.SIGUSR1)
        time.sleep(0.3)
        async def go():
            c = await Client.connect(port)
            ack = await c.subscribe("maps", epoch_ms=200)
            await c.close()
            return ack
        assert arun(go())["epoch_ms"] == 700
        proc.send_signal(signal.SIGTERM)
        assert proc.wait(10) == 0
    finally:
        proc.kill()


def test_cli_daemon_bad_policy_exits_nonzero(tmp_path):
    pol = tmp_path / "p.json"
    pol.write_text("{")
    r = subprocess.run([sys.executable, "-m", "privgps", "daemon", "--port", "0", "--policy", str(pol),
                        "--source", "synthetic:1,1;1,1.01"], capture_output=True, text=True, timeout=30)
    assert r.returncode == 2 and "line 1" in r.stderr
