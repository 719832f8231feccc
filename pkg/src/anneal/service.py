"""HTTP facade for human annotation: serves pending pair queries, accepts
similar/dissimilar answers, reports experiment status, and streams optional
image assets.

One server process hosts one active session. The AL loop runs on a worker
thread and blocks inside the human oracle until every query of the current
iteration is answered (or a configured timeout passes, which aborts the
iteration atomically). Every accepted answer is appended to a CSV log and
fsynced before it is acknowledged, so a killed process never loses
acknowledged labels.
"""
from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from . import model as modelmod
from .data import Dataset, LabeledPair, LabeledSet, Pair
from .engine import ALConfig, ALState, Oracle, OracleError, run_experiment
from .evaluation import HistoryRow

logger = logging.getLogger(__name__)

LABEL_NAMES = {"similar": 1, "dissimilar": 0}
_ASSET_ID = re.compile(r"^\d+$")
_ASSET_EXTENSIONS = ((".png", "image/png"), (".jpg", "image/jpeg"),
                     (".jpeg", "image/jpeg"), (".gif", "image/gif"))


def pair_id_of(pair: Pair) -> str:
    return f"{pair.a}-{pair.b}"


class LabelLog:
    """Append-only CSV of acknowledged answers; one fsync per append."""

    HEADER = "timestamp,pair_id,image_a,image_b,label"

    def __init__(self, path):
        self.path = str(path)
        fresh = not os.path.exists(self.path) or \
            os.path.getsize(self.path) == 0
        self._fh = open(self.path, "a", encoding="utf-8", newline="\n")
        if fresh:
            self._fh.write(self.HEADER + "\n")
            self._flush()

    def _flush(self):
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def append(self, pair: Pair, label: int) -> None:
        name = "similar" if label == 1 else "dissimilar"
        self._fh.write(f"{time.time():.6f},{pair_id_of(pair)},"
                       f"{pair.a},{pair.b},{name}\n")
        self._flush()

    def close(self):
        self._fh.close()

    @staticmethod
    def replay(path) -> list[LabeledPair]:
        """Reconstruct the human-provenance labels, first answer wins."""
        out: dict[Pair, LabeledPair] = {}
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != LabelLog.HEADER:
                raise ValueError(f"unexpected label log header: {header!r}")
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                _, _, a, b, name = line.split(",")
                pair = Pair(int(a), int(b))
                if pair not in out:
                    out[pair] = LabeledPair(pair, LABEL_NAMES[name], "human")
        return [out[p] for p in sorted(out)]


class AnnotationSession:
    """Single-writer annotation queue shared by the AL thread and the HTTP
    handlers. All mutation happens under one lock."""

    def __init__(self, dataset: Dataset, config: ALConfig,
                 model_config: modelmod.ModelConfig, log: LabelLog,
                 timeout: float | None = None,
                 preloaded: dict[str, int] | None = None):
        self.dataset = dataset
        self.config = config
        self.model_config = model_config
        self.log = log
        self.timeout = timeout
        self._lock = threading.Lock()
        self._answered_cv = threading.Condition(self._lock)
        self._pending: dict[str, Pair] = {}
        self._answers: dict[str, int] = {}
        self._preloaded = dict(preloaded or {})
        self.state: ALState | None = None
        self.phase = "starting"  # starting | waiting | training | done | failed
        self.error: str | None = None
        self._abort = False

    # -- AL-thread side -----------------------------------------------------

    def request_labels(self, pairs) -> list[int]:
        """Publish queries and block until all are answered."""
        ids = [pair_id_of(p) for p in pairs]
        with self._lock:
            self._pending = {i: p for i, p in zip(ids, pairs)}
            self._answers = {}
            # answers already on disk from a previous process: accept them
            for i, p in zip(ids, pairs):
                if i in self._preloaded:
                    self._answers[i] = self._preloaded[i]
                    del self._pending[i]
            self.phase = "waiting"
            deadline = None if self.timeout is None \
                else time.monotonic() + self.timeout
            while len(self._answers) < len(ids):
                if self._abort:
                    raise OracleError("session shut down")
                remaining = None if deadline is None \
                    else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    self._pending = {}
                    self._answers = {}
                    self.phase = "failed"
                    raise OracleError("annotation timed out")
                self._answered_cv.wait(timeout=min(remaining or 1.0, 1.0))
            labels = [self._answers[i] for i in ids]
            self._pending = {}
            self._answers = {}
            self.phase = "training"
            return labels

    def run(self, on_iteration=None, resume_state: ALState | None = None):
        """AL loop body; meant for a daemon thread."""
        oracle = HumanOracle(self)
        if resume_state is not None:
            self.attach_state(resume_state)

        def hook(state):
            self.attach_state(state)
            if on_iteration is not None:
                on_iteration(state)

        try:
            self.state = run_experiment(
                self.dataset, self.config, self.model_config, oracle,
                on_iteration=hook, resume_state=resume_state)
            with self._lock:
                self.phase = "done"
        except OracleError as exc:
            logger.warning("annotation loop aborted: %s", exc)
            with self._lock:
                if self.phase != "failed":
                    self.phase = "failed"
                self.error = str(exc)
        except Exception as exc:  # surfaced over /api/session
            logger.exception("experiment failed")
            with self._lock:
                self.phase = "failed"
                self.error = f"{type(exc).__name__}: {exc}"

    def attach_state(self, state: ALState) -> None:
        self.state = state

    def shutdown(self):
        with self._lock:
            self._abort = True
            self._answered_cv.notify_all()

    # -- HTTP side ------------------------------------------------------------

    def submit_labels(self, items) -> dict:
        """First answer per pair wins; duplicates get a conflict status.
        Each accepted answer hits the log before it is acknowledged."""
        results = []
        accepted = 0
        with self._lock:
            for item in items:
                pair_id = item.get("pair_id")
                label_name = item.get("label")
                if not isinstance(pair_id, str) or \
                        label_name not in LABEL_NAMES:
                    results.append({"pair_id": pair_id, "status": "invalid"})
                    continue
                if pair_id in self._answers:
                    results.append({"pair_id": pair_id, "status": "conflict"})
                    continue
                pair = self._pending.get(pair_id)
                if pair is None:
                    results.append({"pair_id": pair_id, "status": "not_found"})
                    continue
                label = LABEL_NAMES[label_name]
                self.log.append(pair, label)  # persist before acknowledging
                self._answers[pair_id] = label
                del self._pending[pair_id]
                accepted += 1
                results.append({"pair_id": pair_id, "status": "accepted"})
            if not self._pending and self._answers:
                self._answered_cv.notify_all()
        return {"results": results, "accepted": accepted,
                "rejected": len(results) - accepted}

    def session_view(self) -> dict:
        with self._lock:
            state = self.state
            history = []
            if state is not None:
                history = [{
                    "iteration": r.iteration, "bits": r.bits,
                    "map_at_5": r.map_at_5, "labeled_pairs": r.labeled_pairs,
                    "transitive_pairs": r.transitive_pairs,
                } for r in state.history]
            return {
                "iteration": state.iteration if state else 0,
                "bits_spent": state.bits_spent if state else 0.0,
                "budget_bits": self.config.budget_bits,
                "pending_count": len(self._pending),
                "answered_count": len(self._answers),
                "phase": self.phase,
                "error": self.error,
                "strategy": self.config.strategy,
                "seed": self.config.seed,
                "history": history,
            }

    def pending_view(self, limit: int, assets_available: bool) -> dict:
        def image_view(image_id: int) -> dict:
            record = self.dataset.by_id[image_id]
            view = {"id": image_id,
                    "features": [float(v) for v in record.features]}
            if assets_available:
                view["asset_uri"] = f"/api/assets/{image_id}"
            return view

        with self._lock:
            items = []
            for pair_id, pair in self._pending.items():
                if len(items) >= limit:
                    break
                items.append({"pair_id": pair_id,
                              "image_a": image_view(pair.a),
                              "image_b": image_view(pair.b)})
            return {"queries": items,
                    "active": self.phase == "waiting"}


class HumanOracle(Oracle):
    """Blocks the AL loop on the annotation queue."""

    provenance = "human"

    def __init__(self, session: AnnotationSession):
        self._session = session

    def label(self, pair: Pair) -> int:
        return self.label_pairs([pair])[0]

    def label_pairs(self, pairs) -> list[int]:
        return self._session.request_labels(pairs)


def make_handler(session: AnnotationSession, asset_root: str | None,
                 ui_dir: str | None):
    """Bind the request handler class to one session."""

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            logger.debug("http: " + fmt, *args)

        def _send_json(self, payload, status=200):
            body = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _send_bytes(self, body: bytes, content_type: str, status=200):
            self.send_response(status)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            path, _, query = self.path.partition("?")
            if path == "/api/session":
                self._send_json(session.session_view())
            elif path == "/api/queries":
                limit = 50
                for part in query.split("&"):
                    if part.startswith("limit="):
                        try:
                            limit = max(0, int(part[len("limit="):]))
                        except ValueError:
                            self._send_json({"error": "bad limit"}, 400)
                            return
                self._send_json(
                    session.pending_view(limit, asset_root is not None))
            elif path.startswith("/api/assets/"):
                self._serve_asset(path[len("/api/assets/"):])
            else:
                self._serve_static(path)

        def do_POST(self):
            if self.path.partition("?")[0] != "/api/labels":
                self._send_json({"error": "not found"}, 404)
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                items = json.loads(self.rfile.read(length).decode())
            except (ValueError, json.JSONDecodeError):
                self._send_json({"error": "malformed JSON body"}, 400)
                return
            if not isinstance(items, list) or \
                    not all(isinstance(i, dict) for i in items):
                self._send_json(
                    {"error": "body must be a list of labels"}, 400)
                return
            self._send_json(session.submit_labels(items))

        def _serve_asset(self, image_id: str):
            if not _ASSET_ID.match(image_id):
                self._send_json({"error": "bad asset id"}, 400)
                return
            if asset_root is None:
                self._send_json({"error": "no assets configured"}, 404)
                return
            for ext, ctype in _ASSET_EXTENSIONS:
                candidate = os.path.join(asset_root, image_id + ext)
                if os.path.isfile(candidate):
                    with open(candidate, "rb") as fh:
                        self._send_bytes(fh.read(), ctype)
                    return
            self._send_json({"error": "asset not found"}, 404)

        def _serve_static(self, path: str):
            if ui_dir is None:
                self._send_bytes(_PLACEHOLDER_PAGE.encode(), "text/html")
                return
            name = "index.html" if path == "/" else path.lstrip("/")
            if "/" in name.strip("/") or name.startswith("."):
                self._send_json({"error": "not found"}, 404)
                return
            full = os.path.join(ui_dir, name)
            if not os.path.isfile(full):
                self._send_json({"error": "not found"}, 404)
                return
            ctype = {"html": "text/html", "js": "text/javascript",
                     "css": "text/css", "map": "application/json",
                     "ico": "image/x-icon"}.get(
                         name.rsplit(".", 1)[-1], "application/octet-stream")
            with open(full, "rb") as fh:
                self._send_bytes(fh.read(), ctype)

    return Handler


_PLACEHOLDER_PAGE = """<!doctype html>
<html><head><title>annotation session</title></head>
<body><h1>Annotation session running</h1>
<p>No UI bundle configured; talk to the JSON API under /api/.</p>
</body></html>
"""


def start_server(session: AnnotationSession, port: int,
                 asset_root: str | None = None,
                 ui_dir: str | None = None,
                 host: str = "127.0.0.1") -> ThreadingHTTPServer:
    handler = make_handler(session, asset_root, ui_dir)
    server = ThreadingHTTPServer((host, port), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True,
                              name="annotation-http")
    thread.start()
    return server


# -- snapshots ----------------------------------------------------------------

SNAPSHOT_VERSION = 1


def write_snapshot(path, state: ALState, config: ALConfig,
                   checkpoint_path) -> None:
    """Persist enough to resume: counters, every labeled pair, history, and
    the model checkpoint next to it."""
    modelmod.save_checkpoint(state.model, checkpoint_path)
    doc = {
        "version": SNAPSHOT_VERSION,
        "seed": config.seed,
        "iteration": state.iteration,
        "bits_spent": state.bits_spent,
        "initial_bits": state.initial_bits,
        "checkpoint": os.path.basename(str(checkpoint_path)),
        "labeled": [[lp.pair.a, lp.pair.b, lp.label, lp.provenance]
                    for lp in state.labeled.items()],
        "history": [[r.iteration, r.bits, r.map_at_5, r.labeled_pairs,
                     r.transitive_pairs] for r in state.history],
    }
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_snapshot(path) -> ALState:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {doc.get('version')}")
    checkpoint = os.path.join(os.path.dirname(os.path.abspath(str(path))),
                              doc["checkpoint"])
    model = modelmod.load_checkpoint(checkpoint)
    labeled = LabeledSet([
        LabeledPair(Pair(int(a), int(b)), int(label), provenance)
        for a, b, label, provenance in doc["labeled"]])
    state = ALState(model=model, labeled=labeled,
                    iteration=int(doc["iteration"]),
                    bits_spent=float(doc["bits_spent"]))
    state.initial_bits = float(doc["initial_bits"])
    state.history = [HistoryRow(int(i), float(b), float(m), int(lp), int(tp))
                     for i, b, m, lp, tp in doc["history"]]
    return state
