"""Newline-delimited JSON query service over a read-only fingerprint database.

One request per line: ``{"fingerprint": [...], "label": Y, "k": K}``;
one response per line: ``{"neighbors": [{"distance": d, "source": s,
"hash": hex}, ...]}``.  A malformed line answers with an error object and
the connection stays open.
"""

from __future__ import annotations

import json
import socket
import socketserver
import threading

import numpy as np

from .errors import CaltrainError
from .linkage import FingerprintDB


def _handle_line(db: FingerprintDB, line: bytes) -> dict:
    try:
        doc = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        return {"error": "malformed JSON line"}
    if not isinstance(doc, dict):
        return {"error": "request must be a JSON object"}
    try:
        fingerprint = np.asarray(doc["fingerprint"], dtype=np.float64)
        label = int(doc["label"])
        k = int(doc.get("k", 9))
    except (KeyError, TypeError, ValueError):
        return {"error": "need fingerprint (list), label (int), k (int)"}
    if k < 1:
        return {"error": "k must be >= 1"}
    try:
        neighbors = db.query_knn(fingerprint, label, k)
    except CaltrainError as e:
        return {"error": str(e)}
    return {
        "neighbors": [
            {"distance": n.distance, "source": n.source_id, "hash": n.digest_hex}
            for n in neighbors
        ]
    }


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        while True:
            line = self.rfile.readline()
            if not line:
                return
            if not line.strip():
                continue
            reply = _handle_line(self.server.db, line)
            self.wfile.write(json.dumps(reply).encode("utf-8") + b"\n")
            self.wfile.flush()


class QueryServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], db: FingerprintDB):
        super().__init__(address, _Handler)
        self.db = db


def serve_queries(db: FingerprintDB, host: str = "127.0.0.1", port: int = 0) -> QueryServer:
    """Start serving in a background thread; caller shuts down the server."""
    server = QueryServer((host, port), db)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server


def query_remote(address: tuple[str, int], fingerprint, label: int, k: int) -> dict:
    """One query round trip, mirroring the wire schema."""
    with socket.create_connection(address, timeout=30) as sock:
        payload = json.dumps(
            {"fingerprint": np.asarray(fingerprint, dtype=float).tolist(), "label": label, "k": k}
        )
        sock.sendall(payload.encode("utf-8") + b"\n")
        buf = b""
        while not buf.endswith(b"\n"):
            chunk = sock.recv(65536)
            if not chunk:
                break
            buf += chunk
    return json.loads(buf.decode("utf-8"))
