"""HTTP serving of the model roster behind the audit wire protocol.

Routes and schemas mirror the protocol exactly:
  /v1/classify /v1/encode /v1/decode /v1/generate /v1/nli
Errors are non-2xx with {"error": msg}; malformed requests are 4xx.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import torch
import yaml

from .models import ClassifierHead, build_backbone, nli_score, sample_from_states
from .prefix import DEFAULT_PREFIX_TOKENS, PrefixParaphraser, load_prefixes


class ModelLoadError(Exception):
    pass


class RequestError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


@dataclass
class ServeManifest:
    labels: list[str]
    seed: int = 1234
    host: str = "127.0.0.1"
    port: int = 8601
    device: str = "cpu"
    d_model: int = 64
    num_layers: int = 2
    num_heads: int = 4
    d_ff: int = 128
    d_kv: int = 16
    prefix_tokens: int = DEFAULT_PREFIX_TOKENS
    top_p: float = 0.9
    temperature: float = 1.0
    max_new_tokens: int = 24
    prefix_weights: str | None = None

    def __post_init__(self):
        if not self.labels or len(set(self.labels)) != len(self.labels):
            raise ModelLoadError("manifest needs a non-empty list of distinct labels")
        if not 0 < self.top_p <= 1:
            raise ModelLoadError("top_p must be in (0, 1]")
        if self.device != "cpu" and not torch.cuda.is_available():
            raise ModelLoadError(f"device '{self.device}' not available")


def load_manifest(path: str | Path) -> ServeManifest:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    try:
        return ServeManifest(**raw)
    except TypeError as exc:
        raise ModelLoadError(f"bad manifest: {exc}") from exc


class ModelBackend:
    """All five routes over one seeded backbone; single-request inference."""

    def __init__(self, manifest: ServeManifest):
        self.manifest = manifest
        try:
            backbone = build_backbone(
                manifest.seed,
                d_model=manifest.d_model,
                num_layers=manifest.num_layers,
                num_heads=manifest.num_heads,
                d_ff=manifest.d_ff,
                d_kv=manifest.d_kv,
            )
            self.paraphraser = PrefixParaphraser(
                backbone, prefix_tokens=manifest.prefix_tokens, seed=manifest.seed
            )
            if manifest.prefix_weights:
                load_prefixes(self.paraphraser, manifest.prefix_weights)
            self.classifier = ClassifierHead(backbone, manifest.labels, manifest.seed)
        except (OSError, RuntimeError, ValueError) as exc:
            raise ModelLoadError(f"failed to build models: {exc}") from exc
        self.backbone = backbone
        self._lock = threading.Lock()

    # -- helpers ---------------------------------------------------------------

    def _text(self, payload: dict, key: str) -> str:
        value = payload.get(key)
        if not isinstance(value, str) or not value:
            raise RequestError(400, f"'{key}' must be a non-empty string")
        return value

    def _matrix(self, payload: dict) -> torch.Tensor:
        rows = payload.get("embedding")
        if not isinstance(rows, list) or not rows:
            raise RequestError(400, "'embedding' must be a non-empty list of rows")
        widths = {len(r) if isinstance(r, list) else -1 for r in rows}
        if len(widths) != 1 or widths & {-1, 0}:
            raise RequestError(400, "'embedding' rows must be equal-length lists")
        if widths != {self.backbone.config.d_model}:
            raise RequestError(
                400,
                f"'embedding' width {widths.pop()} != model dimension {self.backbone.config.d_model}",
            )
        try:
            matrix = torch.tensor(rows, dtype=torch.float32)
        except (TypeError, ValueError) as exc:
            raise RequestError(400, f"'embedding' entries must be numbers: {exc}") from exc
        if not torch.isfinite(matrix).all():
            raise RequestError(400, "'embedding' contains non-finite entries")
        return matrix

    def _generator(self, payload: dict, *parts: str) -> torch.Generator:
        seed = payload.get("seed")
        if seed is None:
            digest = hashlib.blake2b("|".join(parts).encode("utf-8"), digest_size=8).digest()
            seed = int.from_bytes(digest, "little") % 2**31
        elif not isinstance(seed, int):
            raise RequestError(400, "'seed' must be an integer")
        gen = torch.Generator()
        gen.manual_seed(int(seed))
        return gen

    # -- routes -----------------------------------------------------------------

    def handle(self, route: str, payload: dict) -> dict:
        handler = {
            "classify": self._classify,
            "encode": self._encode,
            "decode": self._decode,
            "generate": self._generate,
            "nli": self._nli,
        }.get(route)
        if handler is None:
            raise RequestError(404, f"unknown route '{route}'")
        if not isinstance(payload, dict):
            raise RequestError(400, "request body must be a JSON object")
        with self._lock:
            return handler(payload)

    def _classify(self, payload: dict) -> dict:
        return {"label": self.classifier.classify(self._text(payload, "text"))}

    def _encode(self, payload: dict) -> dict:
        states = self.paraphraser.encode(self._text(payload, "text"))
        return {"embedding": [[float(v) for v in row] for row in states]}

    def _decode(self, payload: dict) -> dict:
        matrix = self._matrix(payload)
        generator = self._generator(payload, "decode", str(matrix.sum().item()))
        text = self.paraphraser.decode(
            matrix,
            self.manifest.top_p,
            self.manifest.temperature,
            generator,
            max_new_tokens=self.manifest.max_new_tokens,
        )
        return {"text": text}

    def _generate(self, payload: dict) -> dict:
        prompt = self._text(payload, "prompt")
        n = payload.get("n")
        if not isinstance(n, int) or n < 1:
            raise RequestError(400, "'n' must be a positive integer")
        top_p = payload.get("top_p", self.manifest.top_p)
        temperature = payload.get("temperature", self.manifest.temperature)
        if not isinstance(top_p, (int, float)) or not 0 < top_p <= 1:
            raise RequestError(400, "'top_p' must be in (0, 1]")
        generator = self._generator(payload, "generate", prompt, str(n))
        # prompted generation: plain encoder over the prompt, no prefixes
        from .models import encoder_states

        states = encoder_states(self.backbone, prompt)
        texts = [
            sample_from_states(
                self.backbone,
                states,
                float(top_p),
                float(temperature),
                generator,
                max_new_tokens=self.manifest.max_new_tokens,
            )
            for _ in range(n)
        ]
        return {"texts": texts}

    def _nli(self, payload: dict) -> dict:
        premise = self._text(payload, "premise")
        hypothesis = self._text(payload, "hypothesis")
        score = nli_score(self.backbone, premise, hypothesis)
        if not math.isfinite(score):
            raise RequestError(500, "nli score is non-finite")
        return {"entailment": min(1.0, max(0.0, score))}


class _Handler(BaseHTTPRequestHandler):
    backend: ModelBackend

    def do_POST(self):  # noqa: N802
        if not self.path.startswith("/v1/"):
            self._reply(404, {"error": f"unknown path {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length) or b"{}")
        except (ValueError, json.JSONDecodeError):
            self._reply(400, {"error": "request body is not valid JSON"})
            return
        try:
            response = self.backend.handle(self.path[len("/v1/") :], payload)
        except RequestError as exc:
            self._reply(exc.status, {"error": exc.message})
            return
        except Exception as exc:  # inference failure -> 5xx per contract
            self._reply(500, {"error": f"inference failed: {exc}"})
            return
        self._reply(200, response)

    def _reply(self, status: int, body: dict) -> None:
        data = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


def serve_models(manifest: ServeManifest) -> ThreadingHTTPServer:
    """Bind the manifest's models on its host/port; caller drives the loop."""
    backend = ModelBackend(manifest)
    handler = type("Handler", (_Handler,), {"backend": backend})
    server = ThreadingHTTPServer((manifest.host, manifest.port), handler)
    server.daemon_threads = True
    return server


def start_server(manifest: ServeManifest):
    server = serve_models(manifest)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address[:2]
    return server, f"http://{host}:{port}"
