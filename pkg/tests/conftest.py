from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

from ragloop.corpus import CorpusSnapshot, Document, HUMAN_SOURCE, SourceTag
from ragloop.corpus import _snapshot_from_documents


def human_doc(doc_id: str, text: str) -> Document:
    return Document(doc_id=doc_id, text=text, source=HUMAN_SOURCE)


def generated_doc(doc_id: str, text: str, generator: str, query_id: str,
                  iteration: int = 1) -> Document:
    return Document(doc_id=doc_id, text=text,
                    source=SourceTag(kind="generated", generator_name=generator),
                    origin_query_id=query_id, iteration_added=iteration)


def snapshot_of(docs: list[Document]) -> CorpusSnapshot:
    return _snapshot_from_documents(docs)


def write_jsonl_file(path: Path, records: list[dict]) -> Path:
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return path


class StubServer:
    """Tiny local HTTP server for exercising the remote-backend wire formats.

    Routes map a path to a callable taking the JSON payload and returning
    either a JSON-serializable reply or an (status_code, reply) pair.
    Every request is recorded for assertions.
    """

    def __init__(self):
        self.routes = {}
        self.requests: list[tuple[str, dict]] = []
        self.auth_headers: list[str | None] = []
        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                payload = json.loads(self.rfile.read(length) or b"{}")
                server.requests.append((self.path, payload))
                server.auth_headers.append(self.headers.get("Authorization"))
                handler = server.routes.get(self.path)
                if handler is None:
                    self.send_response(404)
                    self.end_headers()
                    return
                reply = handler(payload)
                status = 200
                if isinstance(reply, tuple):
                    status, reply = reply
                body = json.dumps(reply).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        daemon=True)
        self._thread.start()

    @property
    def base_url(self) -> str:
        host, port = self._httpd.server_address
        return f"http://{host}:{port}"

    def url(self, path: str) -> str:
        return self.base_url + path

    def close(self):
        self._httpd.shutdown()
        self._httpd.server_close()


@pytest.fixture
def stub_server():
    server = StubServer()
    yield server
    server.close()
