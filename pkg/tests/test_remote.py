import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from mdts.core import DNA, MASK, MaskedDesign, Vocabulary
from mdts.errors import MalformedResponseError, TransportError
from mdts.predictor import PromptBundle
from mdts.predictor import RemotePredictor

dna = Vocabulary.discrete(DNA)


class FakeServer:
    """Serves uniform fills; ``mode`` switches in failures."""

    def __init__(self):
        self.mode = "ok"
        self.fail_first = 0
        self.requests = []
        self.in_flight = 0
        self.peak = 0
        self.delay = 0.0
        self.lock = threading.Lock()
        fake = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                with fake.lock:
                    fake.requests.append((self.path, body))
                    fake.in_flight += 1
                    fake.peak = max(fake.peak, fake.in_flight)
                    n = len(fake.requests)
                time.sleep(fake.delay)
                with fake.lock:
                    fake.in_flight -= 1
                if n <= fake.fail_first:
                    self.send_response(503)
                    self.end_headers()
                    return
                payload = fake.respond(body)
                raw = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}"
        self.thread = threading.Thread(target=self.httpd.serve_forever, args=(0.01,), daemon=True)
        self.thread.start()

    def respond(self, body):
        alphabet = body["alphabet"]
        rng = np.random.default_rng(body["seed"])
        tokens = [alphabet[rng.integers(len(alphabet))] if t == "<M>" else t for t in body["tokens"]]
        m = sum(t == "<M>" for t in body["tokens"])
        probs = [[1.0 / len(alphabet)] * len(alphabet) for _ in range(m)]
        conf = [1.0 / len(alphabet)] * m
        if self.mode == "short":
            tokens = tokens[:-1]
        elif self.mode == "outside":
            tokens = ["X" if t == "<M>" else t for t in body["tokens"]]
        elif self.mode == "changed":
            tokens = ["T"] * len(tokens)
        elif self.mode == "badsum":
            probs = [[0.5] * len(alphabet) for _ in range(m)]
        elif self.mode == "conf":
            conf = [0.9] * m
        elif self.mode == "notjson":
            return b"not json"
        elif self.mode == "missing":
            return {"tokens": tokens}
        return {"tokens": tokens, "probs": probs, "confidences": conf}

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def server():
    s = FakeServer()
    yield s
    s.close()


def test_round_trip_preserves_length_and_unmasked(server):
    p = RemotePredictor(server.url, timeout=5)
    m = MaskedDesign((0, MASK, 2, MASK), 0.5)
    prompt = PromptBundle("desc", "rows", "instr")
    r = p.fill(prompt, m, dna, 1.0, 11)
    assert len(r.completed_tokens) == 4
    assert r.completed_tokens[0] == 0 and r.completed_tokens[2] == 2
    assert r.positions == (1, 3)
    path, body = server.requests[-1]
    assert path == "/v1/fill"
    assert body == {"prompt": prompt.render(), "tokens": ["A", "<M>", "G", "<M>"],
                    "alphabet": list(DNA), "temperature": 1.0, "seed": 11}


def test_retries_then_succeeds(server):
    server.fail_first = 2
    p = RemotePredictor(server.url, timeout=5, retries=3, backoff=0.0)
    p.fill(None, MaskedDesign.fully_masked(3), dna)
    assert p.transport_attempts == 3


def test_gives_up_after_retries(server):
    server.fail_first = 100
    p = RemotePredictor(server.url, timeout=5, retries=2, backoff=0.0)
    with pytest.raises(TransportError):
        p.fill(None, MaskedDesign.fully_masked(3), dna)
    assert p.transport_attempts == 3


@pytest.mark.parametrize("mode", ["short", "outside", "changed", "badsum", "conf", "notjson", "missing"])
def test_malformed_responses_rejected(server, mode):
    server.mode = mode
    p = RemotePredictor(server.url, timeout=5)
    with pytest.raises(MalformedResponseError):
        p.fill(None, MaskedDesign((1, MASK, MASK), 2 / 3), dna)
    assert p.transport_attempts == 1


def test_unreachable_endpoint_fails_at_construction():
    s = FakeServer()
    url = s.url
    s.close()
    with pytest.raises(TransportError):
        RemotePredictor(url, timeout=1)
    p = RemotePredictor(url, timeout=1, retries=0, deferred_connect=True)
    assert p.transport_attempts == 0
    with pytest.raises(TransportError):
        p.fill(None, MaskedDesign.fully_masked(2), dna)


def test_in_flight_limit(server):
    server.delay = 0.05
    p = RemotePredictor(server.url, timeout=5, max_in_flight=2)
    with ThreadPoolExecutor(6) as pool:
        list(pool.map(lambda s: p.fill(None, MaskedDesign.fully_masked(3), dna, 1.0, s), range(12)))
    assert 1 <= server.peak <= 2
    assert p.transport_attempts == 12


def test_rejects_nonpositive_temperature(server):
    p = RemotePredictor(server.url, timeout=5)
    with pytest.raises(ValueError):
        p.fill(None, MaskedDesign.fully_masked(2), dna, 0.0)
