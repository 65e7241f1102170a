"""Rubric judge: prompt rendering, a chat-completion HTTP client, verdict
parsing, a deterministic mock judge and judge-vs-judge agreement.

Wire format (request):

    {"model": ..., "temperature": 0,
     "messages": [{"role": "system", "content": <rubric>},
                  {"role": "user", "content": [
                      {"type": "text", "text": <task description>},
                      {"type": "image_url", "image_url": {"url": "data:image/png;base64,..."}},
                      ... four images: source, masked view, mask, result ...]}]}

Response: ``{"choices": [{"message": {"content": <free text>}}]}``. The
sub-scores are read from the last ``<criterion>: <number>`` line of each
criterion.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Sequence

import httpx
import numpy as np
from PIL import Image

from .errors import JudgeError
from .rewards import fidelity, vividness
from .toyworld import InpaintTask, masked_view, prototype

log = logging.getLogger(__name__)

API_KEY_ENV = "JUDGE_API_KEY"

RUBRIC = """\
You are a human expert in analysis of image inpainting.
Please evaluate the image inpainting result based on the following three criteria:
- Aesthetic Quality (0–40 points):
  - Visual appeal in color harmony, composition, style coherence
  - Texture realism and naturalness
- Structural Coherence (0–30 points)
  - Preservation of geometric structures and content continuity
  - Seamlessness at mask boundaries
- Semantic Alignment (0–30 points)
  - Faithfulness to the Text Prompt instructions
  - Contextual consistency of added or restored content

For each criterion, provide:
- A sub‑score.
- A 1–2‑sentence justification.
Then compute the total score (0–100).
"""

CRITERIA = {
    "aesthetic": ("Aesthetic Quality", 40.0),
    "structural": ("Structural Coherence", 30.0),
    "semantic": ("Semantic Alignment", 30.0),
}
SUM_TOLERANCE = 1e-6


def render_prompt() -> str:
    return RUBRIC


@dataclass(frozen=True)
class JudgeVerdict:
    aesthetic: float
    structural: float
    semantic: float
    total: float
    raw: str = ""

    def __post_init__(self):
        for key, (name, hi) in CRITERIA.items():
            v = getattr(self, key)
            if not 0.0 <= v <= hi:
                raise JudgeError(f"{name} sub-score {v} outside [0, {hi:g}]", "judge-range",
                                 self.raw)
        expected = self.aesthetic + self.structural + self.semantic
        if abs(self.total - expected) > SUM_TOLERANCE:
            raise JudgeError(
                f"stated total {self.total} != sum of sub-scores {expected}", "judge-sum",
                self.raw)


_NUMBER = r"(-?\d+(?:\.\d+)?)"


def _last_match(label: str, text: str) -> float | None:
    pattern = re.compile(re.escape(label) + r"[^:\n]*:\s*\**\s*" + _NUMBER, re.IGNORECASE)
    found = pattern.findall(text)
    return float(found[-1]) if found else None


def parse_verdict(text: str) -> JudgeVerdict:
    """Extract the three sub-scores and total from free-text judge output."""
    values = {}
    for key, (name, _) in CRITERIA.items():
        v = _last_match(name, text)
        if v is None:
            raise JudgeError(f"could not find a {name!r} score in judge response",
                             "judge-parse", text)
        values[key] = v
    total = _last_match("Total", text)
    if total is None:
        total = sum(values.values())
    return JudgeVerdict(values["aesthetic"], values["structural"], values["semantic"], total,
                        text)


# --- request building ------------------------------------------------------------

def png_base64(img: np.ndarray) -> str:
    arr = np.asarray(img)
    arr8 = np.round(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)
    mode = "L" if arr8.ndim == 2 else "RGB"
    buf = io.BytesIO()
    Image.fromarray(arr8, mode=mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def label_description(label: int) -> str:
    return f"Fill the masked region so the image shows an instance of class {label}."


@dataclass
class JudgeRequest:
    system_prompt: str
    description: str
    images: dict[str, str]  # name -> base64 PNG
    endpoint: str
    model: str = "gpt-4"
    timeout: float = 60.0
    token: str | None = field(default=None, repr=False)

    IMAGE_NAMES = ("source", "masked", "mask", "result")

    def __post_init__(self):
        if not self.system_prompt.strip():
            raise JudgeError("empty system prompt", "judge-request")
        missing = [n for n in self.IMAGE_NAMES if not self.images.get(n)]
        if missing:
            raise JudgeError(f"missing images: {', '.join(missing)}", "judge-request")

    def body(self) -> dict:
        content = [{"type": "text", "text": self.description}]
        for name in self.IMAGE_NAMES:
            content.append({"type": "text", "text": f"{name} image:"})
            content.append({"type": "image_url",
                            "image_url": {"url": "data:image/png;base64," + self.images[name]}})
        return {"model": self.model, "temperature": 0,
                "messages": [{"role": "system", "content": self.system_prompt},
                             {"role": "user", "content": content}]}


def build_request(task: InpaintTask, img: np.ndarray, endpoint: str, model: str = "gpt-4",
                  timeout: float = 60.0) -> JudgeRequest:
    images = {"source": png_base64(task.source), "masked": png_base64(masked_view(task)),
              "mask": png_base64(task.mask), "result": png_base64(img)}
    return JudgeRequest(render_prompt(), label_description(task.label), images, endpoint,
                        model, timeout, os.environ.get(API_KEY_ENV))


def judge_remote(req: JudgeRequest, max_retries: int = 3, backoff: float = 0.5,
                 client: httpx.Client | None = None) -> JudgeVerdict:
    """POST one request; transport errors and 5xx/429 responses are retried
    with exponential backoff. Parse and range errors are not retried."""
    headers = {"Content-Type": "application/json"}
    if req.token:
        headers["Authorization"] = f"Bearer {req.token}"
    own = client is None
    client = client or httpx.Client(timeout=req.timeout)
    try:
        last_error: Exception | None = None
        for attempt in range(max_retries + 1):
            if attempt:
                time.sleep(backoff * 2 ** (attempt - 1))
            try:
                resp = client.post(req.endpoint, json=req.body(), headers=headers)
            except httpx.HTTPError as e:
                last_error = e
                log.warning("judge request failed (attempt %d): %s", attempt + 1, e)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = JudgeError(f"judge endpoint returned {resp.status_code}",
                                        "judge-network")
                continue
            if resp.status_code != 200:
                raise JudgeError(f"judge endpoint returned {resp.status_code}: "
                                 f"{resp.text[:200]}", "judge-network")
            try:
                text = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError):
                raise JudgeError("response is not a chat completion", "judge-parse",
                                 resp.text) from None
            return parse_verdict(text)
        raise JudgeError(f"judge unreachable after {max_retries + 1} attempts: {last_error}",
                         "judge-network")
    finally:
        if own:
            client.close()


def judge_remote_many(tasks: Sequence[InpaintTask], images: Sequence[np.ndarray], endpoint: str,
                      model: str = "gpt-4", parallelism: int = 4, timeout: float = 60.0,
                      **kwargs):
    """Judge several results with bounded parallelism. Failed requests yield a
    :class:`JudgeError` in their slot instead of a verdict."""
    def one(args):
        task, img = args
        try:
            return judge_remote(build_request(task, img, endpoint, model, timeout), **kwargs)
        except JudgeError as e:
            return e

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as ex:
        return list(ex.map(one, zip(tasks, images)))


def remote_judge(endpoint: str, model: str = "gpt-4", timeout: float = 60.0,
                 **kwargs) -> Callable[[InpaintTask, np.ndarray], float]:
    """Scalar judge (total score) backed by the remote endpoint."""
    return lambda task, img: judge_remote(
        build_request(task, img, endpoint, model, timeout), **kwargs).total


# --- mock judge ------------------------------------------------------------------

def judge_mock(task: InpaintTask, img: np.ndarray) -> JudgeVerdict:
    """Deterministic rubric stand-in: vividness closeness to the class
    prototype, exactness of unmasked pixels, and prototype fidelity."""
    proto = prototype(task.label, task.height, task.width)
    aesthetic = 40.0 * float(np.clip(1.0 - 4.0 * abs(vividness(img) - vividness(proto)), 0, 1))
    keep = task.mask < 0.5
    exact = np.all(np.asarray(img)[keep] == task.source[keep], axis=-1)
    structural = 30.0 * float(np.mean(exact)) if exact.size else 30.0
    semantic = 30.0 * float(np.clip(1.0 + fidelity(task, img) / 0.05, 0, 1))
    total = aesthetic + structural + semantic
    return JudgeVerdict(aesthetic, structural, semantic, total, "mock")


def mock_score(task: InpaintTask, img: np.ndarray) -> float:
    return judge_mock(task, img).total


# --- agreement -----------------------------------------------------------------

def _winner(judge, task, x, y) -> int:
    sx, sy = judge(task, x), judge(task, y)
    if isinstance(sx, JudgeVerdict):
        sx, sy = sx.total, sy.total
    return (sx > sy) - (sx < sy)


def judge_agreement(judge_a, judge_b, pairs: Sequence[tuple[np.ndarray, np.ndarray, InpaintTask]]
                    ) -> tuple[float, int]:
    """Percentage of pairs on which both judges pick the same winner (a tie
    agrees only with a tie). Returns ``(percent, skipped)``."""
    if not pairs:
        raise JudgeError("agreement needs at least one pair", "judge")
    agree = counted = skipped = 0
    for x, y, task in pairs:
        try:
            wa, wb = _winner(judge_a, task, x, y), _winner(judge_b, task, x, y)
        except Exception as e:
            log.warning("judge failed on task %d: %s", task.task_id, e)
            skipped += 1
            continue
        counted += 1
        agree += wa == wb
    if counted == 0:
        raise JudgeError("every pair failed", "judge")
    return 100.0 * agree / counted, skipped


# --- local fake endpoint ---------------------------------------------------------

class FakeJudgeServer:
    """Local chat-completion endpoint for exercising :func:`judge_remote`.

    ``responder(body) -> (status, payload)`` decides each reply; by default a
    fixed well-formed verdict is returned. Received bodies are kept in
    ``requests``. Use as a context manager.
    """

    DEFAULT_TEXT = ("Aesthetic Quality: 32\nThe colors are coherent.\n"
                    "Structural Coherence: 27\nBoundaries are seamless.\n"
                    "Semantic Alignment: 25\nMatches the class.\nTotal: 84")

    def __init__(self, responder=None):
        self.responder = responder or (lambda body: (200, self.completion(self.DEFAULT_TEXT)))
        self.requests: list[dict] = []
        self.headers: list[dict] = []
        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                n = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(n) or b"{}")
                server.requests.append(body)
                server.headers.append(dict(self.headers))
                status, payload = server.responder(body)
                data = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    @staticmethod
    def completion(text: str) -> dict:
        return {"choices": [{"message": {"role": "assistant", "content": text}}]}

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}/v1/chat/completions"

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._httpd.shutdown()
        self._httpd.server_close()
