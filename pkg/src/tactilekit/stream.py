"""HTTP frame service and client.

``/stream`` is multipart/x-mixed-replace with one JPEG per part and the
capture sequence number and monotonic timestamp in ``X-Seq`` and
``X-Timestamp-Ns`` part headers.  ``/frame`` returns the latest JPEG and
``/health`` a small JSON status.  Timestamps come from CLOCK_MONOTONIC,
which every process on the host shares, so one-way delay is measured by
the client directly.
"""

from __future__ import annotations

import http.client
import json
import logging
import socket
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import urlsplit

import cv2
import numpy as np

from .handoff import LatestSlot
from .optics import SensorFrame

log = logging.getLogger(__name__)

BOUNDARY = "frame"
SOCKET_BUFFER = 64 * 1024  # bytes, a few 640x480 JPEGs


class StreamStartupError(RuntimeError):
    pass


class TransportError(ConnectionError):
    pass


@dataclass
class StreamConfig:
    host: str = "127.0.0.1"
    port: int = 8090
    resolution: tuple = (640, 480)
    target_fps: float = 90.0
    jpeg_quality: int = 80

    def __post_init__(self):
        self.resolution = tuple(int(x) for x in self.resolution)
        if not self.target_fps > 0:
            raise ValueError("target_fps must be positive")
        if len(self.resolution) != 2 or min(self.resolution) <= 0:
            raise ValueError("resolution must be two positive integers")
        if not 1 <= int(self.jpeg_quality) <= 100:
            raise ValueError("jpeg_quality must be in 1..100")

    @property
    def bind(self) -> str:
        return f"{self.host}:{self.port}"


@dataclass
class LatencyReport:
    samples: list = field(default_factory=list)  # ms

    @property
    def mean(self) -> float:
        return float(np.mean(self.samples))

    @property
    def p50(self) -> float:
        return float(np.percentile(self.samples, 50))

    @property
    def p99(self) -> float:
        return float(np.percentile(self.samples, 99))

    def to_dict(self) -> dict:
        return {"n": len(self.samples), "mean_ms": self.mean, "p50_ms": self.p50, "p99_ms": self.p99}


def encode_jpeg(pixels: np.ndarray, quality: int) -> bytes:
    ok, buf = cv2.imencode(".jpg", cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR),
                           [cv2.IMWRITE_JPEG_QUALITY, int(quality)])
    if not ok:
        raise RuntimeError("JPEG encoding failed")
    return buf.tobytes()


def decode_jpeg(data: bytes) -> np.ndarray:
    img = cv2.imdecode(np.frombuffer(data, np.uint8), cv2.IMREAD_COLOR)
    if img is None:
        raise TransportError("undecodable JPEG payload")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def cycle_source(frames):
    """Frame source that loops over a fixed list of frames or pixel arrays."""
    pix = [getattr(f, "pixels", f) for f in frames]
    if not pix:
        raise ValueError("need at least one frame")
    state = {"i": 0}

    def source():
        p = pix[state["i"] % len(pix)]
        state["i"] += 1
        return p

    return source


@dataclass
class _Packet:
    seq: int
    timestamp_ns: int
    jpeg: bytes


class StreamService:
    """Running service: producer thread plus a threaded HTTP server."""

    def __init__(self, config: StreamConfig, source):
        self.config = config
        self.source = source
        self.slot = LatestSlot()
        self.produced = 0
        self.clients = 0
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self.started_ns = time.monotonic_ns()
        handler = _make_handler(self)
        try:
            self.httpd = ThreadingHTTPServer((config.host, config.port), handler)
        except OSError as exc:
            raise StreamStartupError(f"cannot bind {config.bind}: {exc}") from exc
        self.httpd.daemon_threads = True
        self.port = self.httpd.server_address[1]
        self._producer = threading.Thread(target=self._produce, name="stream-producer", daemon=True)
        self._server = threading.Thread(target=self.httpd.serve_forever, kwargs={"poll_interval": 0.05},
                                        name="stream-http", daemon=True)

    @property
    def url(self) -> str:
        return f"http://{self.config.host}:{self.port}"

    def start(self) -> "StreamService":
        self._producer.start()
        self._server.start()
        # first frame available before anyone connects
        self.slot.wait_newer(0, timeout=5.0)
        return self

    def _produce(self):
        period = 1.0 / self.config.target_fps
        w, h = self.config.resolution
        next_t = time.perf_counter()
        seq = 0
        while not self._stop.is_set():
            pix = self.source()
            if pix.shape[:2] != (h, w):
                pix = cv2.resize(pix, (w, h), interpolation=cv2.INTER_AREA)
            ts = time.monotonic_ns()
            seq += 1
            self.slot.put(_Packet(seq, ts, encode_jpeg(pix, self.config.jpeg_quality)))
            self.produced = seq
            next_t += period
            delay = next_t - time.perf_counter()
            if delay > 0:
                self._stop.wait(delay)
            elif delay < -period:
                next_t = time.perf_counter()  # fell behind; do not burst

    @property
    def fps(self) -> float:
        dt = (time.monotonic_ns() - self.started_ns) / 1e9
        return self.produced / dt if dt > 0 else 0.0

    def health(self) -> dict:
        return {"status": "ok" if not self._stop.is_set() else "stopping",
                "frames": self.produced, "fps": round(self.fps, 2), "clients": self.clients,
                "resolution": list(self.config.resolution), "target_fps": self.config.target_fps,
                "jpeg_quality": self.config.jpeg_quality}

    def stop(self):
        self._stop.set()
        self.slot.close()
        self.httpd.shutdown()
        self.httpd.server_close()
        self._producer.join(timeout=2.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def _make_handler(service: StreamService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        # small parts otherwise sit behind Nagle until the peer's delayed ACK
        disable_nagle_algorithm = True

        def log_message(self, fmt, *args):
            log.debug("%s " + fmt, self.address_string(), *args)

        def do_GET(self):
            path = urlsplit(self.path).path
            if path == "/health":
                body = json.dumps(service.health()).encode()
                self._send(200, "application/json", body)
            elif path == "/frame":
                _, pkt = service.slot.peek()
                if pkt is None:
                    self._send(503, "text/plain", b"no frame yet")
                    return
                self._send(200, "image/jpeg", pkt.jpeg,
                           {"X-Seq": pkt.seq, "X-Timestamp-Ns": pkt.timestamp_ns})
            elif path == "/stream":
                self._stream()
            else:
                self._send(404, "text/plain", b"not found")

        def _send(self, code, ctype, body, extra=None):
            self.send_response(code)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            for k, v in (extra or {}).items():
                self.send_header(k, str(v))
            self.end_headers()
            self.wfile.write(body)

        def _stream(self):
            self.close_connection = True
            # keep the kernel from queueing seconds of video for a slow reader;
            # once the buffer is full the writer blocks and then skips to the newest frame
            self.connection.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, SOCKET_BUFFER)
            self.send_response(200)
            self.send_header("Content-Type", f"multipart/x-mixed-replace; boundary={BOUNDARY}")
            self.send_header("Cache-Control", "no-cache")
            self.send_header("Connection", "close")
            self.end_headers()
            with service._lock:
                service.clients += 1
            seen = 0
            try:
                while not service._stop.is_set():
                    got = service.slot.wait_newer(seen, timeout=0.5)
                    if got is None:
                        continue
                    seen, pkt = got
                    head = (f"--{BOUNDARY}\r\nContent-Type: image/jpeg\r\n"
                            f"Content-Length: {len(pkt.jpeg)}\r\nX-Seq: {pkt.seq}\r\n"
                            f"X-Timestamp-Ns: {pkt.timestamp_ns}\r\n\r\n").encode()
                    self.wfile.write(head + pkt.jpeg + b"\r\n")
                    self.wfile.flush()
            except (BrokenPipeError, ConnectionResetError, socket.timeout):
                pass
            finally:
                with service._lock:
                    service.clients -= 1

    return Handler


def serve(config: StreamConfig, source) -> StreamService:
    """Start the producer and HTTP server; returns the running handle."""
    return StreamService(config, source).start()


# ---------------------------------------------------------------- client

def _open(url: str, path: str, timeout: float):
    parts = urlsplit(url if "://" in url else "http://" + url)
    conn = http.client.HTTPConnection(parts.hostname, parts.port or 80, timeout=timeout)
    try:
        conn.connect()
        conn.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, SOCKET_BUFFER)
        conn.request("GET", path)
        resp = conn.getresponse()
    except OSError as exc:
        conn.close()
        raise TransportError(f"cannot reach {url}: {exc}") from exc
    if resp.status != 200:
        conn.close()
        raise TransportError(f"{url}: HTTP {resp.status}")
    return conn, resp


def _read_parts(resp, decode: bool = True):
    """Yields (seq, timestamp_ns, payload) from a multipart body; raises on truncation."""
    delim = f"--{BOUNDARY}".encode()
    while True:
        try:
            line = resp.fp.readline()
        except OSError as exc:
            raise TransportError(f"stream interrupted: {exc}") from exc
        if not line:
            raise TransportError("stream closed by server")
        line = line.strip()
        if not line:
            continue
        if line != delim:
            raise TransportError(f"unexpected line in stream: {line[:40]!r}")
        headers = {}
        while True:
            h = resp.fp.readline()
            if not h:
                raise TransportError("stream closed inside part headers")
            h = h.strip()
            if not h:
                break
            k, _, v = h.decode("latin-1").partition(":")
            headers[k.strip().lower()] = v.strip()
        n = int(headers.get("content-length", "-1"))
        if n < 0:
            raise TransportError("part without Content-Length")
        try:
            payload = resp.fp.read(n)
        except OSError as exc:
            raise TransportError(f"stream interrupted: {exc}") from exc
        if len(payload) != n:
            raise TransportError("stream closed mid-frame")
        yield int(headers.get("x-seq", 0)), int(headers.get("x-timestamp-ns", 0)), payload


def client_connect(url: str, timeout: float = 5.0, decode: bool = True):
    """Iterate frames from ``url``'s ``/stream``.

    Yields SensorFrame objects (or raw JPEG bytes with ``decode=False``)
    whose sequence numbers strictly increase; gaps mean the server
    dropped frames for this client.  A disconnect raises TransportError.
    """
    conn, resp = _open(url, "/stream", timeout)
    last = 0
    try:
        for seq, ts, payload in _read_parts(resp):
            if seq <= last:
                raise TransportError(f"sequence went backwards: {seq} after {last}")
            last = seq
            if decode:
                yield SensorFrame(decode_jpeg(payload), ts, seq)
            else:
                yield SensorFrame(payload, ts, seq)
    finally:
        conn.close()


def fetch_frame(url: str, timeout: float = 5.0) -> SensorFrame:
    conn, resp = _open(url, "/frame", timeout)
    try:
        body = resp.read()
        return SensorFrame(decode_jpeg(body), int(resp.getheader("X-Timestamp-Ns", 0)),
                           int(resp.getheader("X-Seq", 0)))
    finally:
        conn.close()


def fetch_health(url: str, timeout: float = 5.0) -> dict:
    conn, resp = _open(url, "/health", timeout)
    try:
        return json.loads(resp.read())
    finally:
        conn.close()


def measure_latency(url: str, n: int = 100, warmup: int = 5, timeout: float = 5.0) -> LatencyReport:
    """Capture-to-decode delay of ``n`` consecutive streamed frames (ms)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    samples = []
    it = client_connect(url, timeout=timeout)
    try:
        for k, frame in enumerate(it):
            now = time.monotonic_ns()
            if k < warmup:
                continue
            samples.append((now - frame.timestamp) / 1e6)
            if len(samples) >= n:
                break
    finally:
        it.close()
    return LatencyReport(samples)


def measure_rate(url: str, seconds: float = 3.0, decode: bool = True, delay: float = 0.0,
                 timeout: float = 5.0) -> dict:
    """Frames per second received by one client; ``delay`` emulates a slow consumer."""
    it = client_connect(url, timeout=timeout, decode=decode)
    count, seqs = 0, []
    t0 = None
    try:
        for frame in it:
            if t0 is None:
                t0 = time.perf_counter()
                first = frame.sequence
                continue
            count += 1
            seqs.append(frame.sequence)
            if delay:
                time.sleep(delay)
            if time.perf_counter() - t0 >= seconds:
                break
    finally:
        it.close()
    dt = time.perf_counter() - t0
    return {"fps": count / dt, "frames": count, "seconds": dt,
            "dropped": (seqs[-1] - first - count) if seqs else 0}
