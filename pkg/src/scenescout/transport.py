"""Live TCP transport: length-prefixed frames over a socket pair.

The station listens for one robot connection; the robot dials in,
streams candidates, and receives feedback and parameter updates on the
same socket. The simulated mission in sim.py bypasses all of this.
"""

from __future__ import annotations

import logging
import socket
import threading
import time

from .protocol import Message, StreamDecoder, encode, hello_msg

logger = logging.getLogger(__name__)


def send_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode(msg))


class MessagePump:
    """Background reader thread feeding a StreamDecoder; received messages
    land in a handler callback."""

    def __init__(self, sock: socket.socket, handler) -> None:
        self.sock = sock
        self.handler = handler
        self.decoder = StreamDecoder()
        self._stop = threading.Event()
        self.thread = threading.Thread(target=self._run, daemon=True)

    def start(self) -> None:
        self.thread.start()

    def stop(self) -> None:
        self._stop.set()

    def _run(self) -> None:
        self.sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                data = self.sock.recv(65536)
            except socket.timeout:
                continue
            except OSError:
                break
            if not data:
                break
            for msg in self.decoder.feed(data):
                self.handler(msg)


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def run_live_robot(cfg, endpoint: str) -> None:
    """Connect to the station and run the mission against the live link."""
    from .robot import RobotNode, load_dataset
    from .synthetic import bundled_head_and_pool

    head, _ = bundled_head_and_pool(cfg.backbone, cfg.pool_grid)
    node = RobotNode(cfg, head)
    frames = load_dataset(cfg.dataset)
    host, port = parse_addr(endpoint)
    sock = socket.create_connection((host, port), timeout=10.0)
    inbound: list[Message] = []
    inbound_lock = threading.Lock()

    def on_message(msg: Message) -> None:
        with inbound_lock:
            inbound.append(msg)

    pump = MessagePump(sock, on_message)
    pump.start()
    send_message(sock, hello_msg("robot"))

    t = 0.0
    try:
        for name, img, _ in frames[: cfg.warmup_count]:
            node.warmup_frame(img)
        for name, img, png in frames[cfg.warmup_count :]:
            node.process_mission_frame(t, name, img, png)
            with inbound_lock:
                msgs, inbound[:] = list(inbound), []
            for msg in msgs:
                node.handle_message(t, msg)
            for msg in node.poll_outbox(t, link_up=True):
                send_message(sock, msg)
            t += cfg.frame_period
            time.sleep(cfg.frame_period)
        deadline = time.monotonic() + 5.0
        while len(node.buffer) and time.monotonic() < deadline:
            for msg in node.poll_outbox(t, link_up=True):
                send_message(sock, msg)
            time.sleep(0.05)
            t += 0.05
        node.finish(t)
    finally:
        pump.stop()
        sock.close()


class StationLinkServer:
    """Accepts one robot connection and bridges it onto a StationCore."""

    def __init__(self, core, bind_addr: str, clock=None) -> None:
        self.core = core
        self.host, self.port = parse_addr(bind_addr)
        self.clock = clock or time.monotonic
        self._stop = threading.Event()
        self._server = socket.create_server((self.host, self.port))
        self._server.settimeout(0.5)
        self.bound_port = self._server.getsockname()[1]
        self.thread = threading.Thread(target=self._run, daemon=True)
        self._lock = threading.Lock()

    def start(self) -> None:
        self.thread.start()

    def stop(self) -> None:
        self._stop.set()
        self._server.close()

    def _run(self) -> None:
        conn: socket.socket | None = None
        while not self._stop.is_set():
            try:
                conn, addr = self._server.accept()
            except (socket.timeout, OSError):
                continue
            logger.info("robot connected from %s", addr)
            self._serve(conn)
            conn.close()
            conn = None

    def _serve(self, conn: socket.socket) -> None:
        decoder = StreamDecoder()
        conn.settimeout(0.2)
        while not self._stop.is_set():
            try:
                data = conn.recv(65536)
                if not data:
                    return
                msgs = decoder.feed(data)
            except socket.timeout:
                msgs = []
            except OSError:
                return
            with self._lock:
                for msg in msgs:
                    self.core.on_message(self.clock(), msg)
                self.core.tick(self.clock(), None)
                out, self.core.outbox = list(self.core.outbox), []
            for msg in out:
                try:
                    send_message(conn, msg)
                except OSError:
                    return
