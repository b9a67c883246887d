"""Two-channel black-box service: inference on ``x`` and mark extraction on ``key``.

JSON over HTTP; tensors travel as base64 of little-endian float32, row-major.
Only the suspect slot and the audit log change after startup; both sit behind
one lock.  Inference never takes that lock.
"""

from __future__ import annotations

import base64
import binascii
import ipaddress
import json
import logging
import threading
import time
from dataclasses import asdict, dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .digest import hexdigest
from .errors import ShadowMarkError, ShapeError
from .keys import Key
from .train import TrainedPipeline
from .verdict import VerificationPolicy, verify_original, verify_surrogate
from .zoo import ProtectedModelHandle, load_blackbox, load_protected

log = logging.getLogger(__name__)

PROCEDURE_VERSION = "shadowmark-verify/1"
MAX_BODY = 64 * 1024 * 1024

# fields a /verify response may carry; nothing else is ever serialized
VERIFY_RESPONSE_FIELDS = ("mark", "shape", "report")
INFER_RESPONSE_FIELDS = ("y", "shape")


# -- tensor wire format ------------------------------------------------------------


def encode_tensor(a) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f4").tobytes()).decode("ascii")


def decode_tensor(payload: str, shape=None) -> np.ndarray:
    try:
        raw = base64.b64decode(payload, validate=True)
    except (binascii.Error, TypeError, ValueError) as exc:
        raise ValueError(f"tensor payload is not valid base64: {exc}") from None
    if len(raw) % 4:
        raise ValueError(f"tensor payload has {len(raw)} bytes, not a multiple of 4")
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != arr.size:
            raise ValueError(f"payload holds {arr.size} values, shape {list(shape)} needs {int(np.prod(shape))}")
        arr = arr.reshape(shape)
    return arr


# -- state ---------------------------------------------------------------------------


class RequestError(Exception):
    def __init__(self, status: int, message: str, **extra):
        super().__init__(message)
        self.status = status
        self.extra = extra


@dataclass(frozen=True)
class Procedure:
    """Immutable verification procedure: tag plus the digests it is bound to."""

    version: str
    policy: VerificationPolicy
    g_digest: str
    d_digest: str
    m_digest: str

    @property
    def tag(self) -> str:
        body = json.dumps([self.version, asdict(self.policy), self.g_digest, self.d_digest, self.m_digest])
        return f"{self.version}+{hexdigest([body.encode()])}"


@dataclass
class GateConfig:
    protected_checkpoint: str
    pipeline_dir: str
    host: str = "127.0.0.1"
    port: int = 8765
    audit_path: str | None = None
    policy: VerificationPolicy = field(default_factory=VerificationPolicy)


class Gate:
    """Service state: read-only pipeline, a lock-guarded suspect slot and audit log."""

    def __init__(self, pipeline: TrainedPipeline, policy: VerificationPolicy | None = None, audit_path=None):
        self._pipeline = pipeline
        self.procedure = Procedure(
            PROCEDURE_VERSION,
            policy or VerificationPolicy(),
            pipeline.G.digest(),
            pipeline.D.digest(),
            pipeline.protected.digest(),
        )
        self._lock = threading.Lock()
        self._suspect: ProtectedModelHandle | None = None
        self._audit: list[str] = []
        self._audit_path = Path(audit_path) if audit_path else None

    @classmethod
    def from_config(cls, cfg: GateConfig) -> "Gate":
        # both loaders digest-verify; any mismatch raises before the socket opens
        protected = load_protected(cfg.protected_checkpoint)
        pipeline = TrainedPipeline.load(cfg.pipeline_dir, protected)
        return cls(pipeline, cfg.policy, cfg.audit_path)

    # public, non-secret facts
    @property
    def key_dim(self) -> int:
        return self._pipeline.G.input_shape[0]

    @property
    def input_shape(self) -> tuple:
        return tuple(self._pipeline.protected.input_shape)

    @property
    def output_shape(self) -> tuple:
        return tuple(self._pipeline.protected.output_shape)

    def state_snapshot(self) -> dict:
        with self._lock:
            suspect = None if self._suspect is None else self._suspect.digest()
        p = self._pipeline
        return {
            "procedure": self.procedure.tag,
            "G": p.G.digest(),
            "D": p.D.digest(),
            "M": p.protected.digest(),
            "suspect": suspect,
        }

    # -- channels ----------------------------------------------------------------

    def infer(self, x: np.ndarray) -> np.ndarray:
        return self._pipeline.protected.forward(x)

    def verify(self, key: Key, mode: str | None = None) -> tuple[np.ndarray, dict]:
        if key.dim != self.key_dim:
            raise RequestError(400, f"key has length {key.dim}, expected {self.key_dim}", expected_length=self.key_dim)
        with self._lock:
            suspect = self._suspect
        active = suspect or self._pipeline.protected
        mode = mode or ("surrogate" if suspect is not None else "original")
        policy = self.procedure.policy
        p = self._pipeline
        if mode == "original":
            report = verify_original(p, active, key, p.mark, policy)
        elif mode == "surrogate":
            report = verify_surrogate(p, active, key, p.mark, policy)
        else:
            raise RequestError(400, f"mode must be 'original' or 'surrogate', got {mode!r}")
        report.notes.append(f"procedure {self.procedure.tag}")
        report.notes.append(f"active model {'suspect' if suspect is not None else 'protected'} {active.digest()}")
        mark = p.decode(key, active)
        self._append_audit({"event": "verify", "active": "suspect" if suspect else "protected", "report": report.to_dict()})
        return mark, report.to_dict()

    # -- suspect slot --------------------------------------------------------------

    def slot_in(self, checkpoint_path) -> dict:
        try:
            suspect = load_blackbox(checkpoint_path)
        except FileNotFoundError as exc:
            raise RequestError(404, str(exc)) from None
        except (ValueError, ShadowMarkError) as exc:
            # covers non-M roles (decoder / key-encoder uploads) and corrupt blobs
            raise RequestError(403 if "only M-slot" in str(exc) else 400, str(exc)) from None
        G, D = self._pipeline.G, self._pipeline.D
        if tuple(suspect.input_shape) != tuple(G.output_shape) or tuple(suspect.output_shape) != tuple(D.input_shape):
            raise RequestError(
                400,
                f"suspect maps {tuple(suspect.input_shape)} -> {tuple(suspect.output_shape)}; "
                f"needs {tuple(G.output_shape)} -> {tuple(D.input_shape)}",
            )
        with self._lock:
            self._suspect = suspect
            self._append_audit_locked({"event": "slot-in", "checkpoint": str(checkpoint_path), "digest": suspect.digest()})
        return {"slotted": True, "digest": suspect.digest(), "role": getattr(suspect, "role", None)}

    def slot_out(self) -> dict:
        with self._lock:
            had = self._suspect is not None
            self._suspect = None
            self._append_audit_locked({"event": "slot-out", "had_suspect": had})
        return {"slotted": False}

    # -- audit -----------------------------------------------------------------------

    def _append_audit(self, entry: dict) -> None:
        with self._lock:
            self._append_audit_locked(entry)

    def _append_audit_locked(self, entry: dict) -> None:
        entry = {"seq": len(self._audit), "time": time.time(), "procedure": self.procedure.tag, **entry}
        line = json.dumps(entry, sort_keys=True)
        self._audit.append(line)
        if self._audit_path is not None:
            with self._audit_path.open("a") as fh:
                fh.write(line + "\n")

    def audit_lines(self) -> list[str]:
        with self._lock:
            return list(self._audit)


# -- HTTP --------------------------------------------------------------------------


def _is_loopback(host: str) -> bool:
    try:
        return ipaddress.ip_address(host).is_loopback
    except ValueError:
        return False


def _require_fields(body: dict, allowed: set, required: set) -> None:
    extra = set(body) - allowed
    missing = required - set(body)
    if extra:
        raise RequestError(400, f"unexpected fields {sorted(extra)}; each channel takes only its own payload")
    if missing:
        raise RequestError(400, f"missing fields {sorted(missing)}")


class _Handler(BaseHTTPRequestHandler):
    gate: Gate  # bound per server
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("%s %s", self.address_string(), fmt % args)

    def _send(self, status: int, body, content_type="application/json"):
        data = body if isinstance(body, bytes) else json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        if length > MAX_BODY:
            raise RequestError(413, "request body too large")
        raw = self.rfile.read(length) if length else b""
        try:
            body = json.loads(raw or b"{}")
        except json.JSONDecodeError as exc:
            raise RequestError(400, f"body is not JSON: {exc}") from None
        if not isinstance(body, dict):
            raise RequestError(400, "body must be a JSON object")
        return body

    def _dispatch(self, method: str):
        try:
            route = (method, self.path.split("?", 1)[0].rstrip("/") or "/")
            handler = {
                ("POST", "/infer"): self._infer,
                ("POST", "/verify"): self._verify,
                ("POST", "/admin/suspect"): self._slot_in,
                ("DELETE", "/admin/suspect"): self._slot_out,
                ("GET", "/audit"): self._audit,
                ("GET", "/health"): self._health,
            }.get(route)
            if handler is None:
                raise RequestError(404, f"no route {method} {self.path}")
            handler()
        except RequestError as exc:
            self._send(exc.status, {"error": str(exc), **exc.extra})
        except Exception as exc:  # keep the server up; report as 500
            log.exception("request failed")
            self._send(500, {"error": f"{type(exc).__name__}: {exc}"})

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def do_DELETE(self):
        self._dispatch("DELETE")

    # routes
    def _infer(self):
        body = self._body()
        if "key" in body:
            raise RequestError(400, "inference requests must not carry a key")
        _require_fields(body, {"x", "shape", "id"}, {"x", "shape"})
        try:
            x = decode_tensor(body["x"], body["shape"])
        except (ValueError, TypeError) as exc:
            raise RequestError(400, str(exc)) from None
        want = self.gate.input_shape
        if x.shape != want and x.shape[1:] != want:
            raise RequestError(400, f"x has shape {list(x.shape)}, expected {list(want)} or [n, *{list(want)}]")
        try:
            y = self.gate.infer(x)
        except ShapeError as exc:
            raise RequestError(400, str(exc)) from None
        self._send(200, {"y": encode_tensor(y), "shape": list(y.shape)})

    def _verify(self):
        body = self._body()
        if "x" in body:
            raise RequestError(400, "verification requests must not carry a query tensor")
        _require_fields(body, {"key", "mode", "id"}, {"key"})
        try:
            vec = decode_tensor(body["key"])
        except ValueError as exc:
            raise RequestError(400, str(exc)) from None
        if vec.size != self.gate.key_dim:
            raise RequestError(
                400, f"key has length {vec.size}, expected {self.gate.key_dim}", expected_length=self.gate.key_dim
            )
        try:
            key = Key(vec)
        except ValueError as exc:
            raise RequestError(400, str(exc)) from None
        mark, report = self.gate.verify(key, body.get("mode"))
        self._send(200, {"mark": encode_tensor(mark), "shape": list(mark.shape), "report": report})

    def _admin_guard(self):
        if not _is_loopback(self.client_address[0]):
            raise RequestError(403, "admin endpoints accept loopback clients only")

    def _slot_in(self):
        self._admin_guard()
        body = self._body()
        _require_fields(body, {"checkpoint_path"}, {"checkpoint_path"})
        self._send(200, self.gate.slot_in(body["checkpoint_path"]))

    def _slot_out(self):
        self._admin_guard()
        self._send(200, self.gate.slot_out())

    def _audit(self):
        lines = self.gate.audit_lines()
        self._send(200, ("".join(line + "\n" for line in lines)).encode(), "application/x-ndjson")

    def _health(self):
        g = self.gate
        self._send(
            200,
            {
                "procedure": g.procedure.tag,
                "key_dim": g.key_dim,
                "input_shape": list(g.input_shape),
                "output_shape": list(g.output_shape),
            },
        )


def make_server(gate: Gate, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Bind (``port=0`` picks a free port) without starting the loop."""
    handler = type("GateHandler", (_Handler,), {"gate": gate})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server


class RunningGate:
    """Context manager running a server on a daemon thread (tests, CLI smoke runs)."""

    def __init__(self, gate: Gate, host: str = "127.0.0.1", port: int = 0):
        self.gate = gate
        self.server = make_server(gate, host, port)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()
        self.thread.join(timeout=5)


def serve(cfg: GateConfig) -> None:
    """Load, verify and serve until interrupted."""
    gate = Gate.from_config(cfg)
    server = make_server(gate, cfg.host, cfg.port)
    log.info("serving %s on http://%s:%d", gate.procedure.tag, *server.server_address[:2])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


# -- client --------------------------------------------------------------------------


class GateClient:
    """Minimal stdlib client for the service."""

    def __init__(self, url: str, timeout: float = 120.0):
        self.url = url.rstrip("/")
        self.timeout = timeout

    def request(self, method: str, path: str, body: dict | None = None) -> tuple[int, bytes]:
        import urllib.error
        import urllib.request

        data = None if body is None else json.dumps(body).encode()
        req = urllib.request.Request(self.url + path, data=data, method=method)
        if data is not None:
            req.add_header("Content-Type", "application/json")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.status, resp.read()
        except urllib.error.HTTPError as err:
            return err.code, err.read()

    def _json(self, method, path, body=None) -> tuple[int, dict]:
        status, raw = self.request(method, path, body)
        return status, json.loads(raw)

    def infer(self, x: np.ndarray) -> np.ndarray:
        status, body = self._json("POST", "/infer", {"x": encode_tensor(x), "shape": list(np.shape(x))})
        if status != HTTPStatus.OK:
            raise RuntimeError(f"/infer failed ({status}): {body.get('error')}")
        return decode_tensor(body["y"], body["shape"])

    def verify(self, key, mode: str | None = None) -> tuple[np.ndarray, dict]:
        vec = key.vector if isinstance(key, Key) else np.asarray(key, dtype=np.float32)
        payload = {"key": encode_tensor(vec)}
        if mode:
            payload["mode"] = mode
        status, body = self._json("POST", "/verify", payload)
        if status != HTTPStatus.OK:
            raise RuntimeError(f"/verify failed ({status}): {body.get('error')}")
        return decode_tensor(body["mark"], body["shape"]), body["report"]

    def slot_in(self, checkpoint_path) -> tuple[int, dict]:
        return self._json("POST", "/admin/suspect", {"checkpoint_path": str(checkpoint_path)})

    def slot_out(self) -> tuple[int, dict]:
        return self._json("DELETE", "/admin/suspect")

    def audit(self) -> list[dict]:
        status, raw = self.request("GET", "/audit")
        if status != HTTPStatus.OK:
            raise RuntimeError(f"/audit failed ({status})")
        return [json.loads(line) for line in raw.decode().splitlines() if line]
