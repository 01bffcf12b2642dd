import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from streamterm.glossary import Glossary

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number n")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    outcome = "PASS" if report.passed else "FAIL"
    _criteria[props["criterion"]] = (outcome, props.get("title", ""), props.get("detail", ""))


@pytest.fixture(autouse=True)
def _criterion_props(request, record_property):
    m = request.node.get_closest_marker("criterion")
    if m is not None:
        record_property("criterion", m.args[0])
        record_property("title", m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        outcome, title, detail = _criteria[n]
        terminalreporter.line(f"criterion {n:2d} {outcome}: {title}" + (f" [{detail}]" if detail else ""))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_glossary():
    return Glossary.from_pairs([
        ("BERT", {"zh": "BERT", "de": "BERT"}),
        ("attention mechanism", {"zh": "注意力机制", "de": "Aufmerksamkeitsmechanismus"}),
        ("DORAL", {"zh": "多拉尔", "de": "DORAL"}),
        ("valor", {"zh": "勇气", "de": "Tapferkeit"}),
    ])


class JsonServer:
    """Local HTTP server whose POST handler is a plain function ``(path, body) -> (status, payload)``."""

    def __init__(self, handler):
        self.handler = handler
        self.requests: list[tuple[str, dict, dict]] = []
        outer = self

        class H(BaseHTTPRequestHandler):
            def do_POST(self):
                n = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(n) or b"{}")
                outer.requests.append((self.path, body, dict(self.headers)))
                status, payload = outer.handler(self.path, body)
                data = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *a):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), H)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}"
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def json_server():
    return JsonServer


@pytest.fixture
def talk_files(tmp_path):
    """A small synthetic talk written to disk, plus ``--set`` overrides for an oracle/interpreter run."""
    from streamterm.synthetic import make_synthetic_talk, write_talk

    talk = make_synthetic_talk(duration_s=30.0, n_terms=12, glossary_size=60, rate=800, seed=5)
    paths = write_talk(talk, tmp_path / "talk")
    paths["sets"] = ["lang=de", "provider.kind=oracle", f"provider.gold_spans={paths['terms']}",
                     "policy.kind=interpreter", f"policy.transcript={paths['alignment']}"]
    paths["talk"] = talk
    return paths


def with_sets(argv, sets):
    out = list(argv)
    for s in sets:
        out += ["--set", s]
    return out
