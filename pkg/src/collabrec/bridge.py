"""Line-JSON TCP bridge so an external cloud ranker can serve slates.

Protocol: one request per line, newline-delimited UTF-8 JSON over a byte
stream. Request ``{"user": int, "history": [item-ids], "k": int}``;
response is the slate wire format ``{"user", "items", "scores"}`` or
``{"error": string}``. A malformed line gets an error response naming the
line number and the stream stays open.
"""

from __future__ import annotations

import json
import socket
import socketserver
import threading

from .core import CollabrecError, UserHistory
from .infer import CandidateSlate, slate_from_json, slate_to_json

__all__ = ["BridgeError", "BridgeTimeoutError", "BridgeServer", "BridgeClient", "bridge_serve"]


class BridgeError(CollabrecError):
    pass


class BridgeTimeoutError(BridgeError):
    pass


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        cloud = self.server.cloud
        lineno = 0
        for raw in self.rfile:
            lineno += 1
            try:
                req = json.loads(raw.decode("utf-8"))
                user = int(req["user"])
                history = [int(i) for i in req["history"]]
                k = int(req["k"])
            except (ValueError, KeyError, TypeError) as exc:
                self._send({"error": f"protocol error at line {lineno}: {exc}"})
                continue
            try:
                hist = UserHistory.from_sequence(user, history, cloud.max_seq_len)
                slate = cloud.recall_topk(hist, k)
            except CollabrecError as exc:
                self._send({"error": str(exc)})
                continue
            self.wfile.write(slate_to_json(user, slate).encode("utf-8") + b"\n")
            self.wfile.flush()

    def _send(self, obj):
        self.wfile.write(json.dumps(obj, sort_keys=True).encode("utf-8") + b"\n")
        self.wfile.flush()


class BridgeServer:
    """Serves a ranker's ``recall_topk`` over TCP; use as a context manager."""

    def __init__(self, cloud, host: str = "127.0.0.1", port: int = 0):
        self._srv = socketserver.ThreadingTCPServer((host, port), _Handler,
                                                    bind_and_activate=True)
        self._srv.daemon_threads = True
        self._srv.cloud = cloud
        self._thread = threading.Thread(target=self._srv.serve_forever, daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        return self._srv.server_address

    def start(self) -> "BridgeServer":
        self._thread.start()
        return self

    def stop(self):
        self._srv.shutdown()
        self._srv.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def serve_forever(self):
        # Foreground mode for the CLI `bridge` command.
        self._srv.serve_forever()


def bridge_serve(cloud, host: str = "127.0.0.1", port: int = 0) -> BridgeServer:
    """Start a background slate server; returns the running server."""
    return BridgeServer(cloud, host, port).start()


class BridgeClient:
    """Slate provider backed by a remote bridge server.

    Instances are callable with the in-process provider signature
    ``(user, history_items, k) -> CandidateSlate``.
    """

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise BridgeError(f"cannot reach bridge at {host}:{port}: {exc}") from exc
        self._file = self._sock.makefile("rwb")

    def __call__(self, user, history_items, k: int) -> CandidateSlate:
        req = json.dumps({"user": int(user), "history": [int(i) for i in history_items],
                          "k": int(k)}, sort_keys=True)
        try:
            self._file.write(req.encode("utf-8") + b"\n")
            self._file.flush()
            line = self._file.readline()
        except socket.timeout as exc:
            raise BridgeTimeoutError(f"bridge timed out: {exc}") from exc
        if not line:
            raise BridgeError("bridge closed the connection")
        obj = json.loads(line.decode("utf-8"))
        if "error" in obj:
            raise BridgeError(obj["error"])
        _, slate = slate_from_json(line.decode("utf-8"))
        return slate

    def close(self):
        self._file.close()
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
