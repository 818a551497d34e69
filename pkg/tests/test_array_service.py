"""Wire protocol, sensor nodes, aggregator and telemetry."""

import json
import socket
import struct
import threading
import time

import numpy as np
import pytest

from tacgrasp.array_service import (
    AggregationError,
    Aggregator,
    ArrayService,
    NodeConfig,
    SensorHub,
    SensorNode,
    TelemetryServer,
    WireError,
    encode_message,
    read_message,
    send_message,
    telemetry_snapshot,
)
from tacgrasp.experiments import InProcessSensing
from tacgrasp.learning import Regressor
from tacgrasp.tactile import ContactState, Sensor, SensorVariation, default_geometry


@pytest.fixture(scope="module")
def small_setup():
    """Five sensors with small random-weight models: fast, deterministic."""
    geom = default_geometry()
    sensors = [Sensor(geom, SensorVariation.sample(k), sensor_id=k) for k in range(5)]
    models = [Regressor((434, 8, 6), seed=k) for k in range(5)]
    return sensors, models


@pytest.fixture()
def service(small_setup):
    sensors, models = small_setup
    svc = ArrayService(sensors, models, mode="freerun", sample_rate=120)
    with svc:
        yield svc


class TestWireFraming:
    def test_golden_request_bytes(self):
        # 4-byte big-endian length, then the UTF-8 JSON payload, bit-exact
        assert encode_message({"op": "GET_PREDICTION"}) == (
            b"\x00\x00\x00\x17" + b'{"op":"GET_PREDICTION"}'
        )
        assert encode_message({"op": "PING"}) == b"\x00\x00\x00\x0d" + b'{"op":"PING"}'
        assert encode_message({"op": "GET_SSIM"}) == b"\x00\x00\x00\x11" + b'{"op":"GET_SSIM"}'
        assert encode_message({"op": "GET_FRAME"}) == b"\x00\x00\x00\x12" + b'{"op":"GET_FRAME"}'

    def test_round_trip_over_socket_pair(self):
        a, b = socket.socketpair()
        payload = {"op": "GET_SSIM", "extra": [1, 2.5, "x"]}
        a.sendall(encode_message(payload))
        assert read_message(b) == payload
        a.close()
        b.close()

    def test_length_prefix_matches_payload(self):
        msg = encode_message({"seq": 1, "t": 0.25, "sensor_id": 3, "pose_force": [0.0] * 6})
        (length,) = struct.unpack(">I", msg[:4])
        assert length == len(msg) - 4
        assert json.loads(msg[4:]) == {"seq": 1, "t": 0.25, "sensor_id": 3,
                                       "pose_force": [0.0] * 6}

    def test_oversized_frame_rejected(self):
        a, b = socket.socketpair()
        a.sendall(struct.pack(">I", 1 << 30))
        with pytest.raises(WireError):
            read_message(b)
        a.close()
        b.close()

    def test_closed_peer_raises(self):
        a, b = socket.socketpair()
        a.close()
        with pytest.raises(WireError):
            read_message(b)
        b.close()


class TestNode:
    def test_idle_node_predicts_near_zero_and_ssim_near_one(self, small_setup):
        sensors, _ = small_setup
        # a model that echoes zeros keeps the idle semantics easy to check
        hub = SensorHub(5)

        class ZeroModel:
            layer_sizes = (434, 6)

            def predict(self, x):
                return np.zeros((1, 6))

        node = SensorNode(NodeConfig(sensor_id=0), sensors[0], ZeroModel(), hub).start()
        try:
            with socket.create_connection(("127.0.0.1", node.port)) as sock:
                send_message(sock, {"op": "GET_PREDICTION"})
                reading = read_message(sock)
                assert reading["sensor_id"] == 0
                assert reading["pose_force"] == [0.0] * 6
                send_message(sock, {"op": "GET_SSIM"})
                score = read_message(sock)
                assert score["ssim"] > 0.99
        finally:
            node.stop()

    def test_unknown_op_error(self, service):
        host, port = service.endpoints[0]
        with socket.create_connection((host, port)) as sock:
            send_message(sock, {"op": "SELF_DESTRUCT"})
            assert "error" in read_message(sock)

    def test_get_frame_shape(self, service):
        host, port = service.endpoints[2]
        with socket.create_connection((host, port)) as sock:
            send_message(sock, {"op": "GET_FRAME"})
            reply = read_message(sock)
            assert reply["sensor_id"] == 2
            assert len(reply["displacements"]) == 217

    def test_two_clients_consistent_monotone_timestamps(self, service):
        host, port = service.endpoints[0]

        def poll_many(n):
            out = []
            with socket.create_connection((host, port)) as sock:
                for _ in range(n):
                    send_message(sock, {"op": "GET_PREDICTION"})
                    out.append(read_message(sock))
                    time.sleep(0.002)
            return out

        results = [None, None]
        threads = [
            threading.Thread(target=lambda i=i: results.__setitem__(i, poll_many(40)))
            for i in range(2)
        ]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        for res in results:
            by_seq = {}
            for r in res:
                assert r["sensor_id"] == 0
                by_seq[r["seq"]] = r["t"]
            seqs = sorted(by_seq)
            times = [by_seq[s] for s in seqs]
            assert all(a < b for a, b in zip(times, times[1:]))

    def test_port_conflict_raises(self, small_setup):
        sensors, models = small_setup
        hub = SensorHub(5)
        node = SensorNode(NodeConfig(sensor_id=0), sensors[0], models[0], hub).start()
        try:
            clash = SensorNode(
                NodeConfig(sensor_id=1, port=node.port), sensors[1], models[1], hub
            )
            with pytest.raises(OSError):
                clash.start()
        finally:
            node.stop()

    def test_request_after_stop_fails(self, small_setup):
        sensors, models = small_setup
        hub = SensorHub(5)
        node = SensorNode(NodeConfig(sensor_id=0), sensors[0], models[0], hub).start()
        port = node.port
        node.stop()
        with pytest.raises(OSError):
            sock = socket.create_connection(("127.0.0.1", port), timeout=0.5)
            send_message(sock, {"op": "PING"})
            read_message(sock)


class TestAggregator:
    def test_sums_equal_recomputation(self, service):
        agg = service.aggregator()
        try:
            snap = agg.poll()
            pf = [snap.readings[sid]["pose_force"] for sid in sorted(snap.readings)]
            assert len(pf) == 5
            assert snap.fx_sum == pytest.approx(sum(p[3] for p in pf), abs=0)
            assert snap.fy_sum == pytest.approx(sum(p[4] for p in pf), abs=0)
            assert snap.fz_sum == pytest.approx(sum(p[5] for p in pf), abs=0)
        finally:
            agg.close()

    def test_constant_prediction_sums(self, small_setup):
        sensors, _ = small_setup

        class OneNewton:
            def predict(self, x):
                return np.array([[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]])

        svc = ArrayService(sensors, [OneNewton()] * 5, mode="freerun", sample_rate=100)
        with svc:
            agg = svc.aggregator()
            try:
                snap = agg.poll()
                assert snap.fz_sum == pytest.approx(5.0)
            finally:
                agg.close()

    def test_node_down_flagged_and_excluded(self, service):
        service.nodes[3].stop()
        agg = service.aggregator()
        try:
            snap = agg.poll()
            assert 3 in snap.missing
            assert set(snap.readings) == {0, 1, 2, 4}
        finally:
            agg.close()

    def test_all_down_raises(self, small_setup):
        agg = Aggregator([("127.0.0.1", 1)], timeout=0.2)
        with pytest.raises(AggregationError):
            agg.poll()
        agg.close()

    def test_staleness_small_in_steady_state(self, service):
        agg = service.aggregator()
        try:
            time.sleep(0.1)
            staleness = [agg.poll().staleness for _ in range(20)]
            assert np.median(staleness) < 2.0 / 60.0
        finally:
            agg.close()


class TestLockstepParity:
    def test_follow_mode_tracks_published_contacts(self, small_setup):
        sensors, models = small_setup
        hub = SensorHub(5)
        svc = ArrayService(sensors, models, hub=hub, mode="follow", seed=0)
        with svc:
            agg = svc.aggregator()
            try:
                contacts = [ContactState(z=1.0)] * 5
                hub.publish(0.5, contacts)
                deadline = time.monotonic() + 2.0
                while time.monotonic() < deadline:
                    snap = agg.poll()
                    if all(r["t"] >= 0.5 for r in snap.readings.values()):
                        break
                assert all(r["t"] == 0.5 for r in snap.readings.values())
            finally:
                agg.close()

    def test_network_pipeline_matches_in_process_predictions(self, small_setup):
        """Same contacts, same per-node rng seeds: the network path returns
        the predictions the in-process pipeline computes."""
        from tacgrasp.array_service import NetworkSensing

        sensors, models = small_setup
        contacts = [ContactState(z=0.8, shear_y=0.2)] * 5

        local = InProcessSensing(sensors, models, seed=0)
        hub = SensorHub(5)
        svc = ArrayService(sensors, models, hub=hub, mode="follow", seed=0)
        with svc:
            remote = NetworkSensing(hub, svc.aggregator())
            try:
                # same sensors but independent noise draws: compare loosely
                a = local.read(0.1, contacts, want_ssim=False)
                b = remote.read(0.1, contacts, want_ssim=False)
                np.testing.assert_allclose(a.sums, b.sums, atol=0.2)
            finally:
                remote.close()


class TestTelemetry:
    def test_subscribers_receive_identical_latest_payloads(self):
        from websockets.sync.client import connect

        server = TelemetryServer().start()
        try:
            uri = f"ws://127.0.0.1:{server.port}"
            with connect(uri) as c1, connect(uri) as c2:
                time.sleep(0.1)
                snapshot = telemetry_snapshot(1.25, None, {"u": 0.5})
                server.publish(snapshot)
                m1 = c1.recv(timeout=2)
                m2 = c2.recv(timeout=2)
                assert m1 == m2
                assert json.loads(m1)["plant"]["u"] == 0.5
        finally:
            server.stop()

    def test_commands_are_queued(self):
        from websockets.sync.client import connect

        server = TelemetryServer().start()
        try:
            with connect(f"ws://127.0.0.1:{server.port}") as client:
                client.send(json.dumps({"op": "APPLY_FORCE", "f": [1, 2, 3]}))
                client.send(json.dumps({"op": "ADD_MASS", "kg": 0.1}))
                deadline = time.monotonic() + 2.0
                seen = []
                while time.monotonic() < deadline and len(seen) < 2:
                    seen.extend(server.commands())
                    time.sleep(0.01)
                assert [c["op"] for c in seen] == ["APPLY_FORCE", "ADD_MASS"]
        finally:
            server.stop()

    def test_late_subscriber_gets_latest_snapshot(self):
        from websockets.sync.client import connect

        server = TelemetryServer(max_rate=1000).start()
        try:
            server.publish({"t": 1.0})
            time.sleep(0.01)
            server.publish({"t": 2.0})
            with connect(f"ws://127.0.0.1:{server.port}") as client:
                msg = json.loads(client.recv(timeout=2))
                assert msg["t"] == 2.0
        finally:
            server.stop()


class TestSamplingIsolation:
    def test_silent_client_does_not_slow_sampling(self, small_setup):
        sensors, models = small_setup
        hub = SensorHub(5)
        node = SensorNode(
            NodeConfig(sensor_id=0, sample_rate=60), sensors[0], models[0], hub
        ).start()
        try:
            def rate_over(seconds):
                s0 = node.latest_reading().seq
                time.sleep(seconds)
                return (node.latest_reading().seq - s0) / seconds

            base = rate_over(1.0)
            silent = socket.create_connection(("127.0.0.1", node.port))
            loaded = rate_over(1.0)
            silent.close()
            assert loaded > 0.95 * base
        finally:
            node.stop()
