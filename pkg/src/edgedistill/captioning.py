"""Caption synthesis: give every distilled image ``cpi`` captions.

Two captioners share one interface (``captioner_id`` plus
``caption(request) -> str``):

* :class:`TemplateCaptioner` runs offline.  On shape-world images it names
  the attributes it can see; on anything else it emits a deterministic
  sentence seeded by the image bytes.
* :class:`MLLMClient` posts ``{"image": <base64 PNG>, "prompt": <text>}`` to
  an HTTP endpoint and reads ``{"caption": <text>}`` back.
"""

from __future__ import annotations

import base64
import hashlib
import io
import logging
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import requests
from PIL import Image

from .dataset_io import DistilledDataset, ImageTextPair, Provenance, to_uint8
from .errors import ExpansionError, TransportError, ValidationError
from .toy import N_VARIATIONS, ToyCorpusSpec, caption_for, estimate_attributes, parse_caption

log = logging.getLogger(__name__)

MAX_CAPTION_WORDS = 64
ENDPOINT_ENV = "EDGEDISTILL_CAPTIONER_ENDPOINT"


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValidationError("prompt template text must be non-empty")


LLAVA_STYLE = PromptTemplate("llava_style", "Describe the image in one sentence")
GPT_STYLE = PromptTemplate(
    "gpt_style", "Describe the image briefly in one sentence. Do not start with 'the image.'"
)
PROMPT_TEMPLATES: dict[str, PromptTemplate] = {p.name: p for p in (LLAVA_STYLE, GPT_STYLE)}

REPHRASE_PROMPT = "Rephrase the following image caption in one sentence"


@dataclass(frozen=True, eq=False)
class CaptionRequest:
    image: np.ndarray
    prompt: str
    max_captions: int = 1
    captioner_id: str = ""
    variation: int = 0

    def __post_init__(self):
        if not self.prompt or not self.prompt.strip():
            raise ValidationError("caption request prompt must be non-empty")
        if self.max_captions < 1:
            raise ValidationError("max_captions must be positive")


class Captioner(Protocol):
    captioner_id: str

    def caption(self, request: CaptionRequest) -> str: ...


def validate_caption(text, max_words: int = MAX_CAPTION_WORDS) -> str:
    if not isinstance(text, str):
        raise ValidationError("caption must be a string")
    text = " ".join(text.split())
    if not text:
        raise ValidationError("empty caption")
    if len(text.split()) > max_words:
        raise ValidationError(f"caption longer than {max_words} words")
    return text


# ---------------------------------------------------------------------------
# offline captioner

_GENERIC_ADJ = ("bright", "dark", "blurry", "colorful", "faint", "noisy", "soft", "sharp")
_GENERIC_NOUN = ("pattern", "shape", "texture", "blob", "scene", "pattern of dots")
_GENERIC_FRAME = (
    "a {adj} {noun} on a plain background",
    "an abstract picture with a {adj} {noun}",
    "a {adj} {noun} in the picture",
)


class TemplateCaptioner:
    """Deterministic grammar captioner; output depends only on (image bytes, variation)."""

    captioner_id = "template"

    def __init__(self, spec: ToyCorpusSpec | None = None):
        self.spec = spec or ToyCorpusSpec()

    def caption(self, request: CaptionRequest) -> str:
        image = np.asarray(request.image, dtype=np.float32)
        attrs = None
        if image.ndim == 3 and image.shape[-1] == self.spec.image_size:
            attrs = estimate_attributes(image, self.spec)
        if attrs is not None:
            return caption_for(attrs, request.variation)
        return self._generic(image, request.variation)

    def rephrase(self, text: str) -> str:
        """Reword a shape-world caption with another template; other text is returned as is."""
        attrs = parse_caption(text, self.spec)
        if attrs is None:
            return text
        start = zlib.crc32(text.encode("utf-8")) % N_VARIATIONS
        for k in range(N_VARIATIONS):
            out = caption_for(attrs, (start + k) % N_VARIATIONS)
            if out != text:
                return out
        return text

    @staticmethod
    def _generic(image: np.ndarray, variation: int) -> str:
        digest = hashlib.blake2b(np.ascontiguousarray(image).tobytes(), digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        adj = rng.permutation(len(_GENERIC_ADJ))
        noun = _GENERIC_NOUN[int(rng.integers(len(_GENERIC_NOUN)))]
        frame = _GENERIC_FRAME[variation % len(_GENERIC_FRAME)]
        # the adjective cycles first, so consecutive variations always differ
        return frame.format(adj=_GENERIC_ADJ[adj[variation % len(adj)]], noun=noun)


# ---------------------------------------------------------------------------
# HTTP captioner

def encode_png_base64(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image).transpose(1, 2, 0), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class MLLMClient:
    """JSON-over-HTTP client for an external multimodal captioning model.

    Transport failures, timeouts, HTTP 429 and 5xx responses are retried
    ``retries`` times with exponential backoff before a
    :class:`TransportError` is raised.  A reply that is empty or longer than
    ``max_words`` raises :class:`ValidationError` without retrying.
    """

    def __init__(self, endpoint: str, retries: int = 2, timeout: float = 30.0,
                 backoff: float = 0.5, max_words: int = MAX_CAPTION_WORDS,
                 captioner_id: str = "mllm", session: requests.Session | None = None):
        if not endpoint:
            raise ValidationError("captioner endpoint is not configured")
        if retries < 0:
            raise ValidationError("retries must be >= 0")
        self.endpoint = endpoint
        self.retries = retries
        self.timeout = timeout
        self.backoff = backoff
        self.max_words = max_words
        self.captioner_id = captioner_id
        self.session = session or requests.Session()

    def _post(self, payload: dict) -> str:
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.session.post(self.endpoint, json=payload, timeout=self.timeout)
            except requests.RequestException as exc:
                last = exc
                log.warning("captioner request failed (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = TransportError(f"HTTP {resp.status_code} from {self.endpoint}")
                log.warning("captioner returned HTTP %d (attempt %d)", resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise TransportError(f"HTTP {resp.status_code} from {self.endpoint}")
            try:
                body = resp.json()
            except ValueError as exc:
                raise ValidationError("captioner response is not JSON") from exc
            if not isinstance(body, dict) or "caption" not in body:
                raise ValidationError("captioner response lacks a 'caption' field")
            return validate_caption(body["caption"], self.max_words)
        raise TransportError(
            f"captioner at {self.endpoint} failed after {self.retries + 1} attempts: {last}"
        )

    def caption(self, request: CaptionRequest) -> str:
        return self._post({"image": encode_png_base64(request.image), "prompt": request.prompt})

    def rephrase(self, text: str) -> str:
        return self._post({"prompt": REPHRASE_PROMPT, "text": text})


# ---------------------------------------------------------------------------
# expansion

def _captions_for(pair: ImageTextPair, cpi: int, captioner: Captioner, prompt: str) -> tuple[str, ...]:
    have = list(pair.captions)
    need = cpi - len(have)
    variation = 0
    # a few spare attempts to avoid repeating an existing caption
    budget = need + 8
    while len(have) < cpi:
        request = CaptionRequest(pair.image, prompt, need, captioner.captioner_id, variation)
        try:
            text = validate_caption(captioner.caption(request))
        except Exception as exc:
            raise ExpansionError(pair.image_id, str(exc)) from exc
        variation += 1
        if text in have and variation < budget:
            continue
        have.append(text)
    return tuple(have)


def expand(
    dataset: DistilledDataset, cpi: int, captioner: Captioner,
    prompt: PromptTemplate | str = LLAVA_STYLE, workers: int = 4,
) -> DistilledDataset:
    """Add captioner output until every image has ``cpi`` captions.

    The existing captions stay first, in order.  Calls run on up to
    ``workers`` threads; results are assembled in image order.
    """
    if cpi < dataset.cpi:
        raise ValidationError(f"cpi {cpi} is below the current {dataset.cpi} captions per image")
    if cpi == dataset.cpi:
        return dataset
    text = prompt.text if isinstance(prompt, PromptTemplate) else prompt
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        captions = list(pool.map(lambda p: _captions_for(p, cpi, captioner, text), dataset.pairs))
    pairs = [ImageTextPair(p.image_id, p.image, caps) for p, caps in zip(dataset.pairs, captions)]
    prov = [
        Provenance(p.image_id, p.seed_caption, p.sampler_seed, captioner.captioner_id, p.source)
        for p in dataset.provenance
    ]
    return dataset.with_pairs(pairs, cpi, prov or None)


def rephrase_preprocess(captions: Sequence[str], client) -> list[str]:
    """Rewrite seed captions through ``client.rephrase`` before they condition sampling."""
    if not captions:
        raise ValidationError("no captions to rephrase")
    return [validate_caption(client.rephrase(c)) for c in captions]
