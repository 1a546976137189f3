"""Shared builders for the test suite: synthetic datasets and HTTP stubs."""

from __future__ import annotations

import http.server
import json
import threading

import numpy as np

from solmoe.evaluate import Dataset
from solmoe.features import FeatureBundle

FEATURE_NAMES = ("raw", "expl", "pred")


def separable_data(
    n: int,
    d: int,
    seed: int,
    mu: float = 2.0,
    noise: float = 0.4,
    informative: tuple[str, ...] = FEATURE_NAMES,
) -> Dataset:
    """Class signal of strength mu along a fixed direction in each informative
    feature; non-informative features are pure noise."""
    rng = np.random.default_rng(seed)
    dirs = {w: rng.normal(size=d) / np.sqrt(d) for w in FEATURE_NAMES}
    bundles, labels = [], []
    for _ in range(n):
        y = int(rng.integers(0, 2))
        sign = 1.0 if y == 1 else -1.0
        vecs = {}
        for w in FEATURE_NAMES:
            if w in informative:
                vecs[w] = sign * mu * dirs[w] + noise * rng.normal(size=d)
            else:
                vecs[w] = rng.normal(size=d)
        bundles.append(FeatureBundle(vecs["raw"], vecs["expl"], vecs["pred"]))
        labels.append(y)
    return Dataset(bundles, labels)


def majority_data(n: int, d: int, seed: int, mu: float = 1.8, noise: float = 0.6) -> Dataset:
    """Each feature encodes one latent bit; the label is the majority of the
    three bits. Any single feature is capped near 75% accuracy by
    construction, while the three together determine the label exactly."""
    rng = np.random.default_rng(seed)
    dirs = [rng.normal(size=d) / np.sqrt(d) for _ in range(3)]
    bundles, labels = [], []
    for _ in range(n):
        bits = rng.integers(0, 2, size=3)
        labels.append(int(bits.sum() >= 2))
        vecs = [
            (1.0 if bits[i] == 1 else -1.0) * mu * dirs[i] + noise * rng.normal(size=d)
            for i in range(3)
        ]
        bundles.append(FeatureBundle(vecs[0], vecs[1], vecs[2]))
    return Dataset(bundles, labels)


def slice_dataset(ds: Dataset, start: int, stop: int) -> Dataset:
    return Dataset(ds.bundles[start:stop], ds.labels[start:stop])


def random_bundles(n: int, d: int, seed: int) -> list[FeatureBundle]:
    rng = np.random.default_rng(seed)
    return [
        FeatureBundle(rng.normal(size=d), rng.normal(size=d), rng.normal(size=d))
        for _ in range(n)
    ]


class JsonHttpStub:
    """Local HTTP server answering POSTs from a scripted handler.

    The handler receives the decoded JSON body and returns
    (status, payload_dict). Requests are recorded for wire assertions.
    """

    def __init__(self, handler):
        self.handler = handler
        self.requests: list[dict] = []
        stub = self

        class _Handler(http.server.BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length)) if length else {}
                stub.requests.append(body)
                status, payload = stub.handler(body)
                out = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(out)))
                self.end_headers()
                self.wfile.write(out)

            def log_message(self, *args):
                pass

        self._server = http.server.HTTPServer(("127.0.0.1", 0), _Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self._server.server_port}/"

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()
        return False


def chat_reply(content: str):
    """Payload in the chat-completion response shape."""
    return {"choices": [{"message": {"role": "assistant", "content": content}}]}
