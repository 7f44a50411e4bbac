"""Knowledge services computed from trained parameters.

Queries are answered purely from the embedding tables: ``h + r`` stands in
for the unknown tail and ``M_r h - r`` signals whether ``h`` has relation
``r`` (near zero when it does).

The socket protocol frames each message as a little-endian u32 byte length
followed by a UTF-8 JSON object. Requests look like::

    {"kind": "TRIPLE" | "RELATION" | "BUNDLE" | "COMPLETE",
     "entity": name, "relation": name, "top_n": int, "id": any}

Responses carry ``status`` (``OK``, ``NOT_FOUND`` or ``PROTOCOL_ERROR``),
``config_hash`` and the payload. JSON floats round-trip exactly, so vectors
received over the wire equal the in-process results bit for bit.
"""

from __future__ import annotations

import json
import os
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, read_checkpoint
from .kg import KeyRelationMap, Vocab
from .model import ModelParams, _check_ids, relation_residual

_LEN = struct.Struct("<I")
MAX_FRAME = 64 * 1024 * 1024
KINDS = ("TRIPLE", "RELATION", "BUNDLE", "COMPLETE")


class LookupFailure(KeyError):
    pass


def serve_triple(params: ModelParams, h: int, r: int) -> np.ndarray:
    _check_ids(params, h, r)
    return params.entity_emb[h] + params.relation_emb[r]


def serve_relation(params: ModelParams, h: int, r: int) -> np.ndarray:
    return relation_residual(params, h, r)


@dataclass(frozen=True)
class ServiceBundle:
    entity: int
    key_relations: tuple[int, ...]
    triple_vectors: np.ndarray  # (k, d)
    relation_vectors: np.ndarray  # (k, d)

    @property
    def k(self) -> int:
        return len(self.key_relations)

    @property
    def dim(self) -> int:
        return self.triple_vectors.shape[1]

    def vectors(self) -> np.ndarray:
        """All 2k vectors, triple services first."""
        return np.concatenate([self.triple_vectors, self.relation_vectors], axis=0)


def serve_bundle(params: ModelParams, key_map: KeyRelationMap, vocab: Vocab, h: int) -> ServiceBundle:
    cat = vocab.category_of.get(int(h))
    if cat is None or cat not in key_map:
        name = vocab.entity_names[h] if 0 <= h < vocab.n_entities else h
        raise LookupFailure(f"entity {name!r} has no category with key relations")
    rels = tuple(key_map[cat])
    d = params.dim
    if not rels:
        return ServiceBundle(int(h), rels, np.zeros((0, d)), np.zeros((0, d)))
    hs = np.full(len(rels), int(h))
    rs = np.array(rels)
    tv = params.entity_emb[hs] + params.relation_emb[rs]
    rv = relation_residual(params, hs, rs)
    return ServiceBundle(int(h), rels, tv, rv)


def complete_tail(params: ModelParams, h: int, r: int, top_n: int) -> list[tuple[int, float]]:
    """Entities ranked by L1 distance to ``h + r``; ties go to the lower id."""
    if top_n < 1:
        raise ValueError("top_n must be positive")
    query = serve_triple(params, h, r)
    dist = np.abs(params.entity_emb - query).sum(axis=1)
    order = np.argsort(dist, kind="stable")[:top_n]
    return [(int(e), float(dist[e])) for e in order]


class PkgmService:
    """Stateless request handler over a loaded checkpoint."""

    def __init__(self, checkpoint: Checkpoint):
        self.params = checkpoint.params
        for arr in (self.params.entity_emb, self.params.relation_emb, self.params.relation_mat):
            arr.setflags(write=False)
        self.config_hash = checkpoint.config_hash
        self.vocab = checkpoint.vocab()
        self.key_map = checkpoint.key_relations()
        if self.vocab is None:
            raise ValueError("checkpoint carries no vocabulary; cannot serve by name")

    @classmethod
    def from_path(cls, path) -> PkgmService:
        return cls(read_checkpoint(path))

    def _entity(self, name):
        if not isinstance(name, str):
            raise TypeError("entity must be a string")
        if not self.vocab.has_entity(name):
            raise LookupFailure(f"unknown entity {name!r}")
        return self.vocab.entity_id(name)

    def _relation(self, name):
        if not isinstance(name, str):
            raise TypeError("relation must be a string")
        if not self.vocab.has_relation(name):
            raise LookupFailure(f"unknown relation {name!r}")
        return self.vocab.relation_id(name)

    def handle(self, request) -> dict:
        resp = {"config_hash": self.config_hash}
        if isinstance(request, dict) and "id" in request:
            resp["id"] = request["id"]
        try:
            if not isinstance(request, dict):
                raise TypeError("request must be a JSON object")
            kind = request.get("kind")
            if kind not in KINDS:
                raise TypeError(f"unknown kind {kind!r}")
            h = self._entity(request.get("entity"))
            if kind == "BUNDLE":
                b = serve_bundle(self.params, self.key_map or KeyRelationMap(0, {}), self.vocab, h)
                resp.update(
                    relations=[self.vocab.relation_names[r] for r in b.key_relations],
                    triple_vectors=b.triple_vectors.tolist(),
                    relation_vectors=b.relation_vectors.tolist(),
                )
            else:
                r = self._relation(request.get("relation"))
                if kind == "TRIPLE":
                    resp["vector"] = serve_triple(self.params, h, r).tolist()
                elif kind == "RELATION":
                    resp["vector"] = serve_relation(self.params, h, r).tolist()
                else:
                    top_n = request.get("top_n", 10)
                    if not isinstance(top_n, int) or isinstance(top_n, bool) or top_n < 1:
                        raise TypeError("top_n must be a positive integer")
                    resp["ranking"] = [[e, d] for e, d in complete_tail(self.params, h, r, top_n)]
        except LookupFailure as exc:
            resp.update(status="NOT_FOUND", error=str(exc.args[0]))
            return resp
        except (TypeError, ValueError, IndexError) as exc:
            resp.update(status="PROTOCOL_ERROR", error=str(exc))
            return resp
        resp["status"] = "OK"
        return resp

    def handle_bytes(self, payload: bytes) -> bytes:
        try:
            request = json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            resp = {"config_hash": self.config_hash, "status": "PROTOCOL_ERROR", "error": f"bad JSON: {exc}"}
        else:
            resp = self.handle(request)
        return json.dumps(resp).encode("utf-8")


def serve_requests(checkpoint_path, requests):
    """Answer an iterable of request dicts, yielding response dicts in order."""
    service = PkgmService.from_path(checkpoint_path)
    for req in requests:
        yield service.handle(req)


def _recv_exact(sock, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


def read_frame(sock) -> bytes | None:
    head = _recv_exact(sock, _LEN.size)
    if head is None:
        return None
    (n,) = _LEN.unpack(head)
    if n > MAX_FRAME:
        raise ValueError(f"frame of {n} bytes exceeds limit")
    return _recv_exact(sock, n)


def write_frame(sock, payload: bytes) -> None:
    sock.sendall(_LEN.pack(len(payload)) + payload)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        service: PkgmService = self.server.service
        while True:
            try:
                payload = read_frame(self.request)
            except ValueError as exc:
                err = {"config_hash": service.config_hash, "status": "PROTOCOL_ERROR", "error": str(exc)}
                write_frame(self.request, json.dumps(err).encode())
                return
            if payload is None:
                return
            write_frame(self.request, service.handle_bytes(payload))


class PkgmServer(socketserver.ThreadingMixIn, socketserver.UnixStreamServer):
    daemon_threads = True

    def __init__(self, socket_path, service: PkgmService):
        self.service = service
        path = Path(socket_path)
        if path.exists():
            path.unlink()
        super().__init__(str(path), _Handler)

    def server_close(self):
        super().server_close()
        try:
            os.unlink(self.server_address)
        except OSError:
            pass


def start_server(socket_path, service: PkgmService) -> tuple[PkgmServer, threading.Thread]:
    server = PkgmServer(socket_path, service)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, thread


class ServiceClient:
    def __init__(self, socket_path):
        self.sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self.sock.connect(str(socket_path))

    def request(self, req: dict) -> dict:
        write_frame(self.sock, json.dumps(req).encode("utf-8"))
        payload = read_frame(self.sock)
        if payload is None:
            raise ConnectionError("server closed the connection")
        return json.loads(payload.decode("utf-8"))

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def format_vectors(rows) -> str:
    """TSV lines ``tag<TAB>v1...<TAB>vd`` with 9 significant digits."""
    out = []
    for tag, vec in rows:
        out.append("\t".join([tag] + [format(float(v), ".9g") for v in vec]))
    return "\n".join(out) + ("\n" if out else "")


def bundle_rows(bundle: ServiceBundle, vocab: Vocab):
    """Tagged rows for a bundle: ``T|relation|entity`` then ``R|relation|entity``."""
    name = vocab.entity_names[bundle.entity]
    rows = []
    for prefix, vecs in (("T", bundle.triple_vectors), ("R", bundle.relation_vectors)):
        for r, v in zip(bundle.key_relations, vecs):
            rows.append((f"{prefix}|{vocab.relation_names[r]}|{name}", v))
    return rows
