"""HTTP JSON surface over the control plane.

POST /v1/ops            {kind, payload, idempotency_key?} -> {op_id}
GET  /v1/ops/{id}       -> {op_id, status, result?}
POST /v1/workers        {worker_id, role, base_id, max_rank, supported_modules, capacity?}
DELETE /v1/workers/{id}
GET  /v1/policies/{id}  -> policy record
GET  /v1/metrics        -> counters snapshot

Errors are {code, message, retryable}. Mutating calls run one scheduler
tick so desk-scale clients observe progress without a background loop.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .controlplane import ControlPlane, ControlPlaneError, SchemaInvalid, UnknownOp
from .lifecycle import LifecycleError, UnknownPolicy


def _error_body(code: str, message: str, retryable: bool = False) -> bytes:
    return json.dumps({"code": code, "message": message, "retryable": retryable}).encode()


class _Handler(BaseHTTPRequestHandler):
    plane: ControlPlane
    lock: threading.Lock

    def log_message(self, *args):  # quiet by default
        pass

    def _send(self, status: int, body: bytes):
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _json_body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b"{}"
        try:
            doc = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise SchemaInvalid(f"body is not JSON: {exc}")
        if not isinstance(doc, dict):
            raise SchemaInvalid("body must be a JSON object")
        return doc

    def do_POST(self):
        try:
            doc = self._json_body()
            with self.lock:
                if self.path == "/v1/ops":
                    op_id = self.plane.submit(
                        doc.get("kind", ""), doc.get("payload", {}), doc.get("idempotency_key")
                    )
                    self.plane.tick()
                    self._send(200, json.dumps({"op_id": op_id}).encode())
                elif self.path == "/v1/workers":
                    reg = self.plane.register_worker(
                        doc["worker_id"], doc["role"], doc["base_id"],
                        doc["max_rank"], doc.get("supported_modules", []),
                        doc.get("capacity", 1),
                    )
                    self.plane.tick()
                    self._send(200, json.dumps(reg.to_json()).encode())
                else:
                    self._send(404, _error_body("NotFound", self.path))
        except SchemaInvalid as exc:
            self._send(400, _error_body(exc.code, str(exc)))
        except KeyError as exc:
            self._send(400, _error_body("SchemaInvalid", f"missing field {exc}"))
        except ControlPlaneError as exc:
            self._send(400, _error_body(exc.code, str(exc), exc.retryable))

    def do_GET(self):
        try:
            with self.lock:
                if self.path.startswith("/v1/ops/"):
                    op_id = self.path[len("/v1/ops/"):]
                    self.plane.tick()
                    self._send(200, json.dumps(self.plane.poll(op_id)).encode())
                elif self.path.startswith("/v1/policies/"):
                    policy_id = self.path[len("/v1/policies/"):]
                    record = self.plane.lifecycle.get_policy(policy_id)
                    self._send(
                        200,
                        json.dumps(
                            {
                                "policy_id": record.policy_id,
                                "base_id": record.base_id,
                                "adapter_shape": record.adapter_shape.to_json(),
                                "checkpoint_ref": record.checkpoint_ref,
                                "revision_ids": record.revision_ids,
                                "session_holder": record.session_holder,
                            }
                        ).encode(),
                    )
                elif self.path == "/v1/metrics":
                    self._send(200, json.dumps(self.plane.metrics()).encode())
                else:
                    self._send(404, _error_body("NotFound", self.path))
        except UnknownOp as exc:
            self._send(404, _error_body(exc.code, str(exc)))
        except UnknownPolicy as exc:
            self._send(404, _error_body("UnknownPolicy", str(exc)))
        except LifecycleError as exc:
            self._send(400, _error_body(type(exc).__name__, str(exc)))

    def do_DELETE(self):
        if self.path.startswith("/v1/workers/"):
            worker_id = self.path[len("/v1/workers/"):]
            with self.lock:
                self.plane.deregister_worker(worker_id)
            self._send(200, b"{}")
        else:
            self._send(404, _error_body("NotFound", self.path))


def make_server(plane: ControlPlane, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    handler = type("BoundHandler", (_Handler,), {"plane": plane, "lock": threading.Lock()})
    return ThreadingHTTPServer((host, port), handler)


def serve_forever(plane: ControlPlane, host: str, port: int):
    server = make_server(plane, host, port)
    print(f"lorafleet control plane listening on http://{host}:{server.server_address[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
