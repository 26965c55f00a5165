"""Newline-delimited JSON re-ranking over a plain TCP socket.

Each request line is a rerank record (labels optional); each reply line is
``{"request_id": ..., "order": [item_id, ...], "scores": [...]}`` with scores
listed in the returned order.  A malformed line gets
``{"request_id": null, "error": "..."}`` and the connection stays open.
"""
from __future__ import annotations

import json
import logging
import socketserver
import threading
import time
from typing import Mapping, Optional

from .data.schema import record_from_dict
from .model import rank_order

__all__ = ["RerankService", "make_server"]

log = logging.getLogger(__name__)


class RerankService:
    """Stateless request handler shared by all connections (read-only model and PV table)."""

    def __init__(self, reranker, pv_table: Optional[Mapping] = None, pretrainer=None):
        self.reranker = reranker
        self.pv_table = pv_table
        self.pretrainer = pretrainer
        self.latencies: list[float] = []
        self._lock = threading.Lock()

    def _pv_for(self, rec):
        if not self.reranker.config_.use_pv:
            return None
        keys = [(rec.request_id, it.item_id) for it in rec.items]
        if self.pv_table is not None and all(k in self.pv_table for k in keys):
            return {k: self.pv_table[k] for k in keys}
        if self.pretrainer is not None:
            return self.pretrainer.transform([rec])
        raise KeyError(f"no personalized vectors for request {rec.request_id!r}")

    def handle(self, line: str) -> dict:
        start = time.perf_counter()
        try:
            rec = record_from_dict(json.loads(line), "rerank", require_label=False)
            scores = self.reranker.predict_scores([rec], self._pv_for(rec))[0]
        except (ValueError, KeyError, TypeError) as exc:
            msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
            return {"request_id": None, "error": str(msg)}
        order = rank_order(scores)
        reply = {"request_id": rec.request_id,
                 "order": [rec.items[k].item_id for k in order],
                 "scores": [float(scores[k]) for k in order]}
        elapsed = time.perf_counter() - start
        with self._lock:
            self.latencies.append(elapsed)
        log.info("request %s: %d items in %.3f ms", rec.request_id, len(rec.items), 1e3 * elapsed)
        return reply


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        service: RerankService = self.server.service
        for raw in self.rfile:
            text = raw.decode("utf-8", errors="replace").strip()
            if not text:
                continue
            reply = service.handle(text)
            self.wfile.write((json.dumps(reply) + "\n").encode())
            self.wfile.flush()


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def make_server(service: RerankService, host: str = "127.0.0.1", port: int = 0) -> socketserver.ThreadingTCPServer:
    """Bind a threaded server; ``port=0`` picks a free port (see ``server.server_address``)."""
    server = _Server((host, port), _Handler)
    server.service = service
    return server
