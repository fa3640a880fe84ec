"""Client for out-of-process backends speaking newline-delimited JSON on stdio.

Request::

    {"id": 7, "op": "classify", "width": 256, "height": 256,
     "encoding": "raw8-rgb-base64", "pixels": "<base64>"}

Responses, matched by ``id`` and possibly out of order::

    {"id": 7, "probs": [p0, p1, p2, p3, p4]}
    {"id": 8, "mask": "<base64 of w*h bytes, 0 or 255>"}
    {"id": 9, "detections": [{"cx": .., "cy": .., "r": .., "score": ..}]}
    {"id": 10, "error": "message"}

Detect requests also carry ``"meta": {"origin": [x, y], "downsample": d,
"level": k, "source": slide_id}`` so a server can place the tile.
"""

import base64
import binascii
import itertools
import json
import logging
import os
import subprocess
import threading

import numpy as np

from ..errors import BackendError, BackendTimeout, ProtocolError
from ..geometry import Circle, CircleDetection
from .base import check_mask, check_patch, check_probs

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 60.0
DEFAULT_MAX_IN_FLIGHT = 8
PIXEL_ENCODING = "raw8-rgb-base64"
MASK_ENCODING = "raw8-gray-base64"


class _Pending:
    __slots__ = ("event", "response")

    def __init__(self):
        self.event = threading.Event()
        self.response = None


class WireClient:
    """One child process, many concurrent callers.

    At most ``max_in_flight`` requests are outstanding; a reader thread
    routes responses to waiters by id. Any malformed frame marks the
    connection failed and every pending and future call raises.
    """

    def __init__(self, argv, env=None, timeout=DEFAULT_TIMEOUT, max_in_flight=DEFAULT_MAX_IN_FLIGHT):
        if not argv:
            raise BackendError("empty argv for external backend")
        self.argv = list(argv)
        self.timeout = float(timeout)
        full_env = dict(os.environ)
        full_env.update(env or {})
        self._proc = subprocess.Popen(
            self.argv,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            env=full_env,
        )
        self._ids = itertools.count(1)
        self._pending = {}
        self._abandoned = set()
        self._lock = threading.Lock()
        self._write_lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._failure = None
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    @property
    def failed(self):
        return self._failure is not None

    def _fail(self, exc):
        with self._lock:
            if self._failure is None:
                self._failure = exc
            waiters = list(self._pending.values())
        for w in waiters:
            w.event.set()

    def _read_loop(self):
        stream = self._proc.stdout
        for raw in stream:
            try:
                msg = json.loads(raw)
                if not isinstance(msg, dict):
                    raise ValueError("frame is not a JSON object")
                rid = msg["id"]
            except (ValueError, KeyError) as e:
                self._fail(ProtocolError(f"malformed frame {raw[:80]!r}: {e}", field="frame"))
                return
            with self._lock:
                waiter = self._pending.pop(rid, None)
                late = rid in self._abandoned
                self._abandoned.discard(rid)
            if waiter is None:
                if not late:
                    self._fail(ProtocolError(f"response for unknown id {rid!r}", field="id"))
                    return
                continue
            waiter.response = msg
            waiter.event.set()
        self._fail(BackendError(f"backend process exited (code {self._proc.poll()})"))

    def call(self, op, payload):
        if self._failure is not None:
            raise self._failure
        with self._slots:
            rid = next(self._ids)
            waiter = _Pending()
            with self._lock:
                if self._failure is not None:
                    raise self._failure
                self._pending[rid] = waiter
            frame = json.dumps({"id": rid, "op": op, **payload}, separators=(",", ":")) + "\n"
            try:
                with self._write_lock:
                    self._proc.stdin.write(frame.encode("utf-8"))
                    self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as e:
                self._fail(BackendError(f"cannot write to backend: {e}"))
            if not waiter.event.wait(self.timeout):
                with self._lock:
                    if self._pending.pop(rid, None) is not None:
                        self._abandoned.add(rid)
                raise BackendTimeout(rid, self.timeout)
            if waiter.response is None:
                raise self._failure
            resp = waiter.response
        if "error" in resp:
            raise BackendError(f"backend error for request {rid}: {resp['error']}")
        return resp

    def close(self):
        try:
            if self._proc.stdin and not self._proc.stdin.closed:
                self._proc.stdin.close()
        except OSError:
            pass
        try:
            self._proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait()
        self._reader.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def encode_pixels(patch):
    patch = check_patch(patch)
    h, w = patch.shape[:2]
    return {
        "width": w,
        "height": h,
        "encoding": PIXEL_ENCODING,
        "pixels": base64.b64encode(np.ascontiguousarray(patch).tobytes()).decode("ascii"),
    }


def decode_pixels(msg):
    if msg.get("encoding") != PIXEL_ENCODING:
        raise ProtocolError(f"unsupported encoding {msg.get('encoding')!r}", field="encoding")
    w, h = int(msg["width"]), int(msg["height"])
    raw = base64.b64decode(msg["pixels"])
    if len(raw) != w * h * 3:
        raise ProtocolError(f"{len(raw)} bytes for {w}x{h} RGB", field="pixels")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)


def encode_mask(mask):
    m = np.asarray(mask, dtype=bool).astype(np.uint8) * 255
    return base64.b64encode(m.tobytes()).decode("ascii")


class _ExternalBase:
    def __init__(self, client):
        self.client = client
        self.identity = "external:" + " ".join(os.path.basename(a) if i == 0 else a for i, a in enumerate(client.argv))


class ExternalClassifier(_ExternalBase):
    def classify(self, patch):
        resp = self.client.call("classify", encode_pixels(patch))
        if "probs" not in resp:
            raise ProtocolError("missing", field="probs")
        return check_probs(resp["probs"])


class ExternalSegmenter(_ExternalBase):
    def segment(self, patch):
        patch = check_patch(patch)
        resp = self.client.call("segment", encode_pixels(patch))
        if "mask" not in resp:
            raise ProtocolError("missing", field="mask")
        try:
            raw = base64.b64decode(resp["mask"], validate=True)
        except (binascii.Error, TypeError):
            raise ProtocolError("not base64", field="mask") from None
        h, w = patch.shape[:2]
        if len(raw) != w * h:
            raise ProtocolError(f"{len(raw)} bytes for a {w}x{h} mask", field="mask")
        m = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
        if not np.isin(m, (0, 255)).all():
            raise ProtocolError("mask values must be 0 or 255", field="mask")
        return check_mask(m > 0, patch.shape)


class ExternalDetector(_ExternalBase):
    def detect(self, tile):
        payload = encode_pixels(tile.pixels)
        payload["meta"] = {
            "origin": list(tile.origin),
            "downsample": tile.downsample,
            "level": tile.level,
            "source": tile.source,
        }
        resp = self.client.call("detect", payload)
        if not isinstance(resp.get("detections"), list):
            raise ProtocolError("missing or not a list", field="detections")
        out = []
        for i, d in enumerate(resp["detections"]):
            try:
                out.append(
                    CircleDetection(
                        Circle(float(d["cx"]), float(d["cy"]), float(d["r"])), float(d["score"])
                    )
                )
            except (KeyError, TypeError, ValueError) as e:
                raise ProtocolError(str(e), field=f"detections[{i}]") from None
        return out


_KINDS = {"classifier": ExternalClassifier, "segmenter": ExternalSegmenter, "detector": ExternalDetector}


def external_backend(kind, argv, env=None, timeout=DEFAULT_TIMEOUT, max_in_flight=DEFAULT_MAX_IN_FLIGHT):
    """Spawn ``argv`` and wrap it as a backend of the given kind."""
    if kind not in _KINDS:
        raise BackendError(f"unknown backend kind {kind!r}")
    return _KINDS[kind](WireClient(argv, env, timeout, max_in_flight))
