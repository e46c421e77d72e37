"""Local stand-in for a commercial face-comparison endpoint.

POST /compare with {"image_a": base64 PNG, "image_b": base64 PNG} returns
{"confidence": c}. Byte-identical payloads score ``identical_confidence``;
otherwise c = 100 * (s + 1) / 2 where s is the cosine similarity of the
fixture's embedder.
"""

from __future__ import annotations

import argparse
import base64
import binascii
import io
import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)


def decode_png(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


# 0.5 encodes to byte 128, so the reference grey is the decoded value of that byte
MID_GREY = 128 / 255


def channel_mean_embedding(pixels: np.ndarray) -> np.ndarray:
    """Mean colour minus mid-grey, normalized; orthogonality is easy to construct."""
    v = (pixels.reshape(-1, 3) - MID_GREY).mean(axis=0)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("degenerate embedding for a mid-grey image")
    return v / n


def make_embedder(spec: dict) -> Callable[[np.ndarray], np.ndarray]:
    kind = spec.get("kind", "channel_mean")
    if kind == "channel_mean":
        return channel_mean_embedding
    if kind == "toy_fr":
        from ..fr import load_toy_fr

        model = load_toy_fr(spec["path"])

        def embed(pixels: np.ndarray) -> np.ndarray:
            with torch.no_grad():
                e = model.embed_pixels(torch.from_numpy(pixels.astype(np.float32)))
            return e.double().numpy()

        return embed
    raise ValueError(f"unknown embedder kind {kind!r}")


class Rules:
    def __init__(self, fixture: dict | None = None):
        fixture = fixture or {}
        self.identical_confidence = float(fixture.get("identical_confidence", 99.0))
        self.embedder = make_embedder(fixture.get("embedder", {"kind": "channel_mean"}))
        # only stateful rule: answer the first N requests with a fixed status
        fail = fixture.get("fail_first") or {}
        self.fail_status = int(fail.get("status", 429))
        self._fail_left = int(fail.get("count", 0))
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path: str | Path | None) -> "Rules":
        return cls(json.loads(Path(path).read_text()) if path else None)

    def take_failure(self) -> bool:
        with self._lock:
            if self._fail_left > 0:
                self._fail_left -= 1
                return True
            return False

    def confidence(self, png_a: bytes, png_b: bytes) -> float:
        if png_a == png_b:
            return self.identical_confidence
        ea = self.embedder(decode_png(png_a))
        eb = self.embedder(decode_png(png_b))
        s = float(np.clip(np.dot(ea, eb), -1.0, 1.0))
        return 100.0 * (s + 1.0) / 2.0


def make_handler(rules: Rules):
    class Handler(BaseHTTPRequestHandler):
        def _reply(self, status: int, body: dict):
            data = json.dumps(body).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_POST(self):  # noqa: N802
            if self.path.rstrip("/") != "/compare":
                self._reply(404, {"error": "not found"})
                return
            length = int(self.headers.get("Content-Length", 0))
            raw = self.rfile.read(length)
            if rules.take_failure():
                self._reply(rules.fail_status, {"error": "injected failure"})
                return
            try:
                body = json.loads(raw)
                png_a = base64.b64decode(body["image_a"], validate=True)
                png_b = base64.b64decode(body["image_b"], validate=True)
                conf = rules.confidence(png_a, png_b)
            except (ValueError, KeyError, TypeError, binascii.Error, OSError) as exc:
                self._reply(400, {"error": f"bad request: {exc}"})
                return
            self._reply(200, {"confidence": conf})

        def log_message(self, fmt, *args):
            log.debug("mockapi: " + fmt, *args)

    return Handler


class MockServer:
    """Threaded mock API server; usable as a context manager in tests."""

    def __init__(self, rules: Rules | None = None, host: str = "127.0.0.1", port: int = 0):
        self.rules = rules or Rules()
        self.httpd = ThreadingHTTPServer((host, port), make_handler(self.rules))
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "MockServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gift-mockapi", description="Mock face-comparison API server")
    parser.add_argument("--port", type=int, default=8765)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--fixture", help="JSON rules file")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO)
    server = MockServer(Rules.load(args.fixture), args.host, args.port)
    print(f"serving on {server.url}", flush=True)
    try:
        server.httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.httpd.server_close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
