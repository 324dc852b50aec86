import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from logging.handlers import TimedRotatingFileHandler

import pytest

from src.backend import API_KEY_ENV
from src.synthetic import generate_synthetic_corpus
from src.pii import Gazetteer, PatternSet


@pytest.fixture(autouse=True)
def _isolated_environment(monkeypatch):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    yield
    root = logging.getLogger('')
    for handler in list(root.handlers):
        if isinstance(handler, TimedRotatingFileHandler):
            root.removeHandler(handler)
            handler.close()


@pytest.fixture(scope='session')
def synthetic():
    return generate_synthetic_corpus(n_emails=50, n_pii=120, seed=0)


@pytest.fixture(scope='session')
def synthetic_gazetteer(synthetic):
    return Gazetteer.from_mapping(synthetic.gazetteer)


@pytest.fixture(scope='session')
def patterns():
    return PatternSet.default()


class StubCompletionServer:
    """
    Local OpenAI-style completions endpoint. Responses are served from a
    script of (status, body, headers) tuples; once the script runs out every
    request gets a 200 echoing the request index.
    """

    def __init__(self):
        self.requests = []
        self.script = []
        self.lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get('Content-Length', 0))
                body = json.loads(self.rfile.read(length) or b'{}')
                with stub.lock:
                    stub.requests.append({'path': self.path, 'headers': dict(self.headers), 'json': body})
                    step = stub.script.pop(0) if stub.script else None
                if step is None:
                    step = (200, {'choices': [{'text': f"echo {body.get('prompt', '')}"}]}, {})
                status, payload, headers = step
                raw = payload if isinstance(payload, bytes) else json.dumps(payload).encode('utf-8')
                self.send_response(status)
                self.send_header('Content-Type', 'application/json')
                self.send_header('Content-Length', str(len(raw)))
                for name, value in headers.items():
                    self.send_header(name, value)
                self.end_headers()
                self.wfile.write(raw)

            def log_message(self, format, *args):
                pass

        self.server = ThreadingHTTPServer(('127.0.0.1', 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def endpoint(self):
        host, port = self.server.server_address
        return f"http://{host}:{port}"

    def respond(self, *steps):
        with self.lock:
            self.script.extend(steps)

    def start(self):
        self.thread.start()
        return self

    def stop(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_server():
    server = StubCompletionServer().start()
    yield server
    server.stop()
