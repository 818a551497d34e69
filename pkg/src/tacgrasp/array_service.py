"""Networked five-node sensor array.

Each node owns one simulated fingertip: a sampling loop renders the
latest contact into a prediction (and a contact-similarity score) and a
TCP server answers length-prefixed JSON requests with the latest
reading. An aggregator client polls all nodes concurrently and merges
the streams; a WebSocket telemetry server pushes snapshots to UI
subscribers and accepts their command messages.

Wire protocol (control path): every message is a 4-byte big-endian
unsigned payload length followed by a UTF-8 JSON payload.
Requests: {"op":"GET_PREDICTION"} | {"op":"GET_SSIM"} | {"op":"GET_FRAME"}
| {"op":"PING"}. Responses carry {"seq","t","sensor_id", ...} plus the
op-specific field; errors are {"error":"..."}.
"""

from __future__ import annotations

import json
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .learning import Regressor
from .signals import ssim
from .tactile import ContactState, Sensor, features, rasterize

MAX_MESSAGE_BYTES = 1 << 24
HEADER = struct.Struct(">I")

POLL_OPS = ("GET_PREDICTION", "GET_SSIM", "GET_FRAME", "PING")


class WireError(ConnectionError):
    """Raised on malformed framing or a closed peer."""


def encode_message(payload: dict) -> bytes:
    body = json.dumps(payload, separators=(",", ":")).encode("utf-8")
    if len(body) > MAX_MESSAGE_BYTES:
        raise WireError(f"payload of {len(body)} bytes exceeds the frame limit")
    return HEADER.pack(len(body)) + body


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n > 0:
        chunk = sock.recv(n)
        if not chunk:
            raise WireError("peer closed the connection")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_message(sock: socket.socket) -> dict:
    (length,) = HEADER.unpack(_recv_exact(sock, HEADER.size))
    if length > MAX_MESSAGE_BYTES:
        raise WireError(f"frame of {length} bytes exceeds the limit")
    body = _recv_exact(sock, length)
    try:
        return json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WireError(f"bad JSON payload: {exc}") from exc


def send_message(sock: socket.socket, payload: dict):
    sock.sendall(encode_message(payload))


class SensorHub:
    """Versioned latest-value snapshot of per-finger contacts.

    The experiment (or an idle source) publishes contact states; nodes
    either free-run against the latest snapshot or block for new versions
    in lockstep mode.
    """

    def __init__(self, n_sensors: int = 5):
        self._lock = threading.Condition()
        self._version = 0
        self._t = 0.0
        self._contacts = [ContactState.zero()] * n_sensors

    def publish(self, t: float, contacts):
        with self._lock:
            self._version += 1
            self._t = float(t)
            self._contacts = list(contacts)
            self._lock.notify_all()

    def latest(self):
        with self._lock:
            return self._version, self._t, list(self._contacts)

    def wait_newer(self, version: int, timeout: float | None = None):
        """Block until a snapshot newer than `version` exists; None on timeout."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._lock:
            while self._version <= version:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return None
                self._lock.wait(remaining)
            return self._version, self._t, list(self._contacts)


@dataclass(frozen=True)
class NodeConfig:
    sensor_id: int
    host: str = "127.0.0.1"
    port: int = 0
    sample_rate: float = 60.0
    seed: int = 0
    model_path: str | None = None

    def __post_init__(self):
        if not 0 <= self.sensor_id <= 4:
            raise ValueError("sensor_id must be in 0..4")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")


@dataclass(frozen=True)
class SensorReading:
    seq: int
    t: float
    sensor_id: int
    pose_force: tuple
    displacements: tuple
    prediction_frame: bytes = b""  # pre-encoded GET_PREDICTION response


class SensorNode:
    """One array node: sampling loop plus request server.

    mode="freerun" samples the hub's latest snapshot at sample_rate
    against the wall clock; mode="follow" samples exactly once per hub
    version (lockstep with a simulation). The request handlers share the
    latest reading through an atomically swapped immutable tuple and
    never block the sampling loop.
    """

    def __init__(self, cfg: NodeConfig, sensor: Sensor, model: Regressor,
                 hub: SensorHub, mode: str = "freerun"):
        if mode not in ("freerun", "follow"):
            raise ValueError("mode must be 'freerun' or 'follow'")
        self.cfg = cfg
        self.sensor = sensor
        self.model = model
        self.hub = hub
        self.mode = mode
        self._reference = sensor.reference_image()
        self._rng = np.random.default_rng(cfg.seed)
        self._reading: SensorReading | None = None
        self._reading_lock = threading.Lock()
        self._ssim_cache: tuple[int, float] | None = None
        self._ssim_lock = threading.Lock()
        self._stop = threading.Event()
        self._seq = 0
        self._threads: list[threading.Thread] = []
        self._server: socket.socket | None = None
        self.port: int | None = None

    # -- lifecycle ----------------------------------------------------------

    def start(self):
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            server.bind((self.cfg.host, self.cfg.port))
        except OSError as exc:
            server.close()
            raise OSError(
                f"node {self.cfg.sensor_id}: cannot bind {self.cfg.host}:{self.cfg.port}: {exc}"
            ) from exc
        server.listen(16)
        self._server = server
        self.port = server.getsockname()[1]
        self._sample_once()  # a reading exists before the first request
        for target in (self._sampling_loop, self._accept_loop):
            th = threading.Thread(target=target, daemon=True)
            th.start()
            self._threads.append(th)
        return self

    def stop(self):
        self._stop.set()
        if self._server is not None:
            try:
                self._server.close()
            except OSError:
                pass
        self.hub.publish(*self.hub.latest()[1:])  # wake followers
        for th in self._threads:
            th.join(timeout=2.0)

    # -- sampling ------------------------------------------------------------

    def _sample_once(self, snapshot=None):
        if snapshot is None:
            snapshot = self.hub.latest()
        _, t_sim, contacts = snapshot
        contact = contacts[self.cfg.sensor_id]
        t = t_sim if self.mode == "follow" else time.monotonic()
        frame, _, _ = self.sensor.sense(contact, t=t, rng=self._rng)
        pose_force = self.model.predict(features(frame))[0]
        with self._reading_lock:
            prev = self._reading
            if prev is not None and t <= prev.t:
                return
            self._seq += 1
            pf = tuple(float(v) for v in pose_force)
            # encode the hot-path response once, off the request threads
            frame_bytes = encode_message({
                "seq": self._seq, "t": float(t), "sensor_id": self.cfg.sensor_id,
                "pose_force": list(pf),
            })
            self._reading = SensorReading(
                seq=self._seq,
                t=float(t),
                sensor_id=self.cfg.sensor_id,
                pose_force=pf,
                displacements=tuple(map(tuple, frame.displacements)),
                prediction_frame=frame_bytes,
            )

    def _similarity(self, reading: SensorReading) -> float:
        """Contact similarity of a reading vs the rest image, cached by seq.

        Rendering and scoring happen on the requesting thread so the
        sampling loop never pays for clients that do not ask for it.
        """
        with self._ssim_lock:
            if self._ssim_cache is not None and self._ssim_cache[0] == reading.seq:
                return self._ssim_cache[1]
            from .tactile import MarkerFrame

            frame = MarkerFrame(reading.t, reading.sensor_id,
                                np.asarray(reading.displacements))
            image = rasterize(frame, self.sensor.geom, layout=self.sensor.layout)
            value = ssim(image, self._reference)
            self._ssim_cache = (reading.seq, value)
            return value

    def _sampling_loop(self):
        period = 1.0 / self.cfg.sample_rate
        version = self.hub.latest()[0]
        while not self._stop.is_set():
            if self.mode == "follow":
                snap = self.hub.wait_newer(version, timeout=0.2)
                if snap is None:
                    continue
                version = snap[0]
                self._sample_once(snap)
            else:
                start = time.monotonic()
                self._sample_once()
                elapsed = time.monotonic() - start
                if elapsed < period:
                    time.sleep(period - elapsed)

    def latest_reading(self) -> SensorReading | None:
        with self._reading_lock:
            return self._reading

    # -- request serving -------------------------------------------------------

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            th = threading.Thread(target=self._serve_client, args=(conn,), daemon=True)
            th.start()

    def _serve_client(self, conn: socket.socket):
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            while not self._stop.is_set():
                try:
                    request = read_message(conn)
                except WireError:
                    return
                if request.get("op") == "GET_PREDICTION":
                    reading = self.latest_reading()
                    if reading is not None and reading.prediction_frame:
                        conn.sendall(reading.prediction_frame)
                        continue
                send_message(conn, self._respond(request))
        except OSError:
            pass
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def _respond(self, request: dict) -> dict:
        op = request.get("op")
        reading = self.latest_reading()
        if reading is None:
            return {"error": "no reading available"}
        base = {"seq": reading.seq, "t": reading.t, "sensor_id": reading.sensor_id}
        if op == "GET_PREDICTION":
            return {**base, "pose_force": list(reading.pose_force)}
        if op == "GET_SSIM":
            return {**base, "ssim": self._similarity(reading)}
        if op == "GET_FRAME":
            return {**base, "displacements": [list(d) for d in reading.displacements]}
        if op == "PING":
            return base
        return {"error": f"unknown op {op!r}"}


class AggregationError(ConnectionError):
    """Raised when no node can be reached."""


@dataclass
class AggregateSnapshot:
    """Merged latest view across the array."""

    t: float
    readings: dict = field(default_factory=dict)   # sensor_id -> reading dict
    ssim: dict = field(default_factory=dict)       # sensor_id -> float
    missing: set = field(default_factory=set)
    fx_sum: float = 0.0
    fy_sum: float = 0.0
    fz_sum: float = 0.0

    @property
    def staleness(self) -> float:
        """Age spread between the freshest and stalest present readings."""
        if not self.readings:
            return 0.0
        ts = [r["t"] for r in self.readings.values()]
        return max(ts) - min(ts)

    @property
    def ssim_avg(self) -> float:
        if not self.ssim:
            return 1.0
        return float(np.mean(list(self.ssim.values())))

    def pose_force_matrix(self) -> np.ndarray:
        rows = []
        for sid in sorted(self.readings):
            rows.append(self.readings[sid]["pose_force"])
        return np.asarray(rows) if rows else np.zeros((0, 6))


class Aggregator:
    """Polls all nodes concurrently over persistent connections."""

    def __init__(self, endpoints, timeout: float = 0.5):
        self.endpoints = list(endpoints)
        self.timeout = timeout
        self._socks: dict[int, socket.socket] = {}

    def close(self):
        for sock in self._socks.values():
            try:
                sock.close()
            except OSError:
                pass
        self._socks.clear()

    def _connection(self, idx: int) -> socket.socket:
        sock = self._socks.get(idx)
        if sock is None:
            sock = socket.create_connection(self.endpoints[idx], timeout=self.timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.settimeout(self.timeout)
            self._socks[idx] = sock
        return sock

    def _drop(self, idx: int):
        sock = self._socks.pop(idx, None)
        if sock is not None:
            try:
                sock.close()
            except OSError:
                pass

    def poll(self, want_ssim: bool = False) -> AggregateSnapshot:
        """One sweep of the array; unreachable nodes are flagged and
        excluded from the sums.

        All requests are put in flight before any response is read, so
        the nodes answer concurrently and the sweep costs one round trip.
        """
        in_flight = []
        failed = set()
        for i in range(len(self.endpoints)):
            try:
                sock = self._connection(i)
                send_message(sock, {"op": "GET_PREDICTION"})
                if want_ssim:
                    send_message(sock, {"op": "GET_SSIM"})
                in_flight.append((i, sock))
            except (OSError, WireError):
                self._drop(i)
                failed.add(i)

        snap = AggregateSnapshot(t=0.0)
        snap.missing |= failed
        for i, sock in in_flight:
            try:
                reading = read_message(sock)
                score = read_message(sock) if want_ssim else None
            except (OSError, WireError):
                self._drop(i)
                snap.missing.add(i)
                continue
            if "error" in reading or (score is not None and "error" in score):
                snap.missing.add(i)
                continue
            sid = reading["sensor_id"]
            snap.readings[sid] = reading
            if score is not None:
                snap.ssim[sid] = score["ssim"]
            pf = reading["pose_force"]
            snap.fx_sum += pf[3]
            snap.fy_sum += pf[4]
            snap.fz_sum += pf[5]
            snap.t = max(snap.t, reading["t"])
        if not snap.readings:
            raise AggregationError("no array node reachable")
        return snap


class NetworkSensing:
    """Sensing pipeline backed by the array service (lockstep polling).

    Publishes the plant contacts to the hub, then polls until every
    reachable node has sampled the new snapshot, so closed-loop runs over
    loopback see the same data flow as the in-process pipeline.
    """

    def __init__(self, hub: SensorHub, aggregator: Aggregator, n_sensors: int = 5,
                 deadline: float = 0.5):
        self.hub = hub
        self.aggregator = aggregator
        self.n_sensors = n_sensors
        self.deadline = deadline

    def read(self, t: float, contacts, want_ssim: bool = True):
        from .experiments import SensingSample  # local import to avoid a cycle

        self.hub.publish(t, contacts)
        deadline = time.monotonic() + self.deadline
        snap = None
        while True:
            snap = self.aggregator.poll(want_ssim=want_ssim)
            fresh = [r for r in snap.readings.values() if r["t"] >= t]
            if len(fresh) == len(snap.readings) or time.monotonic() > deadline:
                break
        pf = np.zeros((self.n_sensors, 6))
        for sid, reading in snap.readings.items():
            pf[sid] = reading["pose_force"]
        sums = pf[:, 3:6].sum(axis=0)
        return SensingSample(pf, sums, snap.ssim_avg if want_ssim else 1.0)

    def close(self):
        self.aggregator.close()


class TelemetryServer:
    """WebSocket fan-out of telemetry snapshots plus a command inbox.

    Subscribers receive the latest snapshot on join and latest-only
    updates afterward (a slow consumer drops frames, never queues them).
    Inbound JSON messages (APPLY_FORCE, ADD_MASS, START_POUR, ...) are
    queued for the running session to consume.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0, max_rate: float = 60.0):
        self.host = host
        self.port = port
        self.max_rate = max_rate
        self._lock = threading.Condition()
        self._version = 0
        self._payload: str | None = None
        self._commands: list[dict] = []
        self._cmd_lock = threading.Lock()
        self._server = None
        self._thread = None
        self._last_publish = 0.0

    def start(self):
        from websockets.sync.server import serve

        self._server = serve(self._handle, self.host, self.port)
        self.port = self._server.socket.getsockname()[1]
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        if self._server is not None:
            self._server.shutdown()
        with self._lock:
            self._lock.notify_all()
        if self._thread is not None:
            self._thread.join(timeout=2.0)

    def publish(self, snapshot: dict):
        """Replace the latest snapshot; drops frames beyond max_rate."""
        now = time.monotonic()
        if now - self._last_publish < 1.0 / self.max_rate:
            return
        self._last_publish = now
        payload = json.dumps(snapshot, separators=(",", ":"))
        with self._lock:
            self._version += 1
            self._payload = payload
            self._lock.notify_all()

    def commands(self) -> list[dict]:
        """Drain and return the pending inbound command messages."""
        with self._cmd_lock:
            out = self._commands
            self._commands = []
        return out

    def _handle(self, conn):
        receiver = threading.Thread(target=self._receive_loop, args=(conn,), daemon=True)
        receiver.start()
        seen = 0
        while True:
            with self._lock:
                while self._version == seen or self._payload is None:
                    if not self._lock.wait(timeout=0.5):
                        if self._server is None:
                            return
                        continue
                seen = self._version
                payload = self._payload
            try:
                conn.send(payload)
            except Exception:
                return

    def _receive_loop(self, conn):
        while True:
            try:
                message = conn.recv()
            except Exception:
                return
            try:
                command = json.loads(message)
            except json.JSONDecodeError:
                continue
            if isinstance(command, dict) and "op" in command:
                with self._cmd_lock:
                    self._commands.append(command)


def telemetry_snapshot(t: float, snap: AggregateSnapshot | None, plant_digest: dict) -> dict:
    """The one JSON document pushed to telemetry subscribers."""
    sensors = []
    sums = {"fx": 0.0, "fy": 0.0, "fz": 0.0}
    if snap is not None:
        for sid in sorted(snap.readings):
            r = snap.readings[sid]
            sensors.append({
                "sensor_id": sid,
                "t": r["t"],
                "seq": r["seq"],
                "pose_force": r["pose_force"],
                "ssim": snap.ssim.get(sid),
            })
        sums = {"fx": snap.fx_sum, "fy": snap.fy_sum, "fz": snap.fz_sum}
    return {"t": t, "sensors": sensors, "sums": sums, "plant": plant_digest}


class ArrayService:
    """Five nodes plus an aggregator, started and stopped together."""

    def __init__(self, sensors, models, hub: SensorHub | None = None,
                 host: str = "127.0.0.1", base_port: int = 0,
                 sample_rate: float = 60.0, mode: str = "follow", seed: int = 0):
        self.hub = hub or SensorHub(len(sensors))
        self.nodes = []
        for k, (sensor, model) in enumerate(zip(sensors, models)):
            port = 0 if base_port == 0 else base_port + k
            cfg = NodeConfig(sensor_id=k, host=host, port=port,
                             sample_rate=sample_rate, seed=seed * 613 + k)
            self.nodes.append(SensorNode(cfg, sensor, model, self.hub, mode=mode))
        self._started = False

    def start(self):
        started = []
        try:
            for node in self.nodes:
                node.start()
                started.append(node)
        except OSError:
            for node in started:
                node.stop()
            raise
        self._started = True
        return self

    def stop(self):
        if self._started:
            for node in self.nodes:
                node.stop()
            self._started = False

    @property
    def endpoints(self):
        return [(n.cfg.host, n.port) for n in self.nodes]

    def aggregator(self, timeout: float = 0.5) -> Aggregator:
        return Aggregator(self.endpoints, timeout=timeout)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
