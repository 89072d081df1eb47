"""Answer providers: a remote chat-completion client, a retrieval-grounding
wrapper, and deterministic simulators of the failure patterns seen in drug
knowledge probes (literal name reading, common-herb bias, fixed answer bias).

Every provider exposes ``complete(prompt) -> ProviderResponse`` and never
raises for transport or protocol problems; errors travel inside the response.
Deterministic providers are pure functions of (config, prompt), so runs are
reproducible at any concurrency.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import requests

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib

from tcmeval.corpus import Corpus, CorpusError, normalize_name, parse_ingredient
from tcmeval.dataset import EvalDataset
from tcmeval.retrieval import DEFAULT_TOP_K, Index, RetrievedEntry, build_index, search
from tcmeval.protocols import (
    build_rag_prompt,
    extract_inquiry_question,
    extract_verify_question,
    render_ingredient_list,
)

log = logging.getLogger(__name__)

PROVIDER_KINDS = (
    "remote",
    "rag",
    "oracle",
    "grounded",
    "literal",
    "common_herb",
    "biased",
    "fixed_confusion",
)
BIASED_MODES = ("always_yes", "always_no", "bernoulli")

YES_TEXT = "是"
NO_TEXT = "否"


class ProviderConfigError(ValueError):
    """Invalid provider configuration or a missing required resource."""


class ProviderAnswerError(Exception):
    """Internal: a provider cannot answer this prompt; becomes a structured error."""


@dataclass
class ProviderResponse:
    """Either raw_text or error is populated, never both."""

    raw_text: Optional[str]
    latency: float
    retrieval_context: Optional[list[RetrievedEntry]] = None
    error: Optional[str] = None


@dataclass
class ProviderConfig:
    kind: str
    endpoint_url: Optional[str] = None
    model_name: Optional[str] = None
    temperature: float = 0.0
    api_key_env: str = "PROVIDER_API_KEY"
    concurrency_limit: int = 4
    timeout: float = 60.0
    retries: int = 3
    inner: Optional["ProviderConfig"] = None
    # simulator parameters
    mode: Optional[str] = None
    p: float = 0.5
    seed: int = 0
    top_m: int = 10
    k: int = DEFAULT_TOP_K
    match_markers: bool = False
    confusion: Optional[tuple[int, int, int, int]] = None
    lang: str = "zh"

    def validate(self) -> None:
        if self.kind not in PROVIDER_KINDS:
            raise ProviderConfigError(
                f"unknown provider kind {self.kind!r}, expected one of {PROVIDER_KINDS}"
            )
        if self.temperature < 0:
            raise ProviderConfigError(f"temperature must be >= 0, got {self.temperature}")
        if self.concurrency_limit < 1:
            raise ProviderConfigError("concurrency_limit must be a positive count")
        if self.retries < 0:
            raise ProviderConfigError("retries must be >= 0")
        if self.timeout <= 0:
            raise ProviderConfigError("timeout must be positive")
        if self.kind == "remote" and not (self.endpoint_url and self.model_name):
            raise ProviderConfigError("remote provider requires endpoint_url and model_name")
        if self.kind == "rag":
            if self.inner is None:
                raise ProviderConfigError("rag provider requires a nested inner config")
            if self.k < 1:
                raise ProviderConfigError("rag k must be >= 1")
            self.inner.validate()
        if self.kind == "biased":
            if self.mode not in BIASED_MODES:
                raise ProviderConfigError(
                    f"biased mode must be one of {BIASED_MODES}, got {self.mode!r}"
                )
            if self.mode == "bernoulli" and not (0.0 <= self.p <= 1.0):
                raise ProviderConfigError(f"bernoulli p must lie in [0, 1], got {self.p}")
        if self.kind == "common_herb" and self.top_m < 1:
            raise ProviderConfigError("common_herb top_m must be >= 1")
        if self.kind == "fixed_confusion":
            counts = self.confusion
            if (
                counts is None
                or len(counts) != 4
                or any(not isinstance(c, int) or c < 0 for c in counts)
            ):
                raise ProviderConfigError(
                    "fixed_confusion requires confusion = [tp, fp, fn, tn], non-negative ints"
                )

    @classmethod
    def from_dict(cls, obj: dict) -> "ProviderConfig":
        if not isinstance(obj, dict):
            raise ProviderConfigError("provider config must be an object")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ProviderConfigError(f"unknown provider config fields: {sorted(unknown)}")
        data = dict(obj)
        if "inner" in data and data["inner"] is not None:
            data["inner"] = cls.from_dict(data["inner"])
        if "confusion" in data and data["confusion"] is not None:
            data["confusion"] = tuple(data["confusion"])
        if "kind" not in data:
            raise ProviderConfigError("provider config missing 'kind'")
        config = cls(**data)
        config.validate()
        return config

    def snapshot(self) -> dict:
        """Loggable form: set fields only, nested inner expanded, no secrets."""
        out: dict = {}
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            if value is None:
                continue
            if name == "inner":
                value = value.snapshot()
            elif name == "confusion":
                value = list(value)
            out[name] = value
        return out


def load_provider_config(path: str | Path) -> ProviderConfig:
    """Read a provider config from a JSON or TOML file."""
    path = Path(path)
    if path.suffix.lower() == ".toml":
        with open(path, "rb") as fh:
            obj = tomllib.load(fh)
    else:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    try:
        return ProviderConfig.from_dict(obj)
    except ProviderConfigError as exc:
        raise ProviderConfigError(f"{path}: {exc}") from exc


class Provider:
    """Base class: times the call and converts answer errors to responses."""

    def complete(self, prompt: str) -> ProviderResponse:
        start = time.perf_counter()
        try:
            text, context = self._answer(prompt)
        except ProviderAnswerError as exc:
            return ProviderResponse(
                raw_text=None, latency=time.perf_counter() - start, error=str(exc)
            )
        return ProviderResponse(
            raw_text=text, latency=time.perf_counter() - start, retrieval_context=context
        )

    def _answer(self, prompt: str) -> tuple[str, Optional[list[RetrievedEntry]]]:
        raise NotImplementedError


def _require_verify(prompt: str, who: str) -> tuple[str, list[str]]:
    parsed = extract_verify_question(prompt)
    if parsed is None:
        raise ProviderAnswerError(f"{who} could not find a verification question in the prompt")
    return parsed


def _require_inquiry(prompt: str, who: str) -> str:
    name = extract_inquiry_question(prompt)
    if name is None:
        raise ProviderAnswerError(f"{who} could not find an inquiry question in the prompt")
    return name


def _match_keys(tokens: Sequence[str], markers: bool) -> set[str]:
    keys = set()
    for token in tokens:
        try:
            keys.add(parse_ingredient(token).match_key(markers))
        except CorpusError:
            continue
    return keys


class OracleProvider(Provider):
    """Answers from corpus ground truth; the reference point for metrics."""

    def __init__(self, corpus: Corpus, match_markers: bool = False):
        self.corpus = corpus
        self.match_markers = match_markers

    def _answer(self, prompt: str):
        verify = extract_verify_question(prompt)
        if verify is not None:
            name, presented = verify
            try:
                record = self.corpus.lookup(name)
            except CorpusError as exc:
                raise ProviderAnswerError(str(exc)) from exc
            truth = record.match_keys(self.match_markers)
            answer = YES_TEXT if _match_keys(presented, self.match_markers) == truth else NO_TEXT
            return answer, None
        name = _require_inquiry(prompt, "oracle provider")
        try:
            record = self.corpus.lookup(name)
        except CorpusError as exc:
            raise ProviderAnswerError(str(exc)) from exc
        return render_ingredient_list(record.display_ingredients()), None


class GroundedProvider(Provider):
    """Top-1 retrieval over the index, then set comparison or readout.

    A deterministic end-to-end stand-in for a retrieval-augmented model:
    correct whenever retrieval finds the right entry.
    """

    def __init__(self, index: Index, match_markers: bool = False):
        self.index = index
        self.match_markers = match_markers

    def _top1(self, drug_name: str) -> Optional[RetrievedEntry]:
        entries = search(self.index, drug_name, k=1)
        return entries[0] if entries else None

    def _answer(self, prompt: str):
        verify = extract_verify_question(prompt)
        if verify is not None:
            name, presented = verify
            top = self._top1(name)
            if top is None:
                log.warning("grounded verifier: no retrieval hit for %r", name)
                return NO_TEXT, None
            truth = _match_keys(self.index.doc_ingredients[top.doc_id], self.match_markers)
            answer = YES_TEXT if _match_keys(presented, self.match_markers) == truth else NO_TEXT
            return answer, [top]
        name = _require_inquiry(prompt, "grounded provider")
        top = self._top1(name)
        if top is None:
            log.warning("grounded provider: no retrieval hit for %r", name)
            return render_ingredient_list([]), None
        return render_ingredient_list(self.index.doc_ingredients[top.doc_id]), [top]


def _top_frequent(corpus: Corpus, m: int) -> list[str]:
    freq = corpus.oracle_frequency()
    ranked = sorted(freq, key=lambda herb: (-freq[herb], herb))
    return ranked[:m]


class LiteralProvider(Provider):
    """Reads herb names straight out of the drug name (inquiry only).

    Emits every pool ingredient whose canonical name is a substring of the
    drug name, ordered by position (longer match first on ties), then pads
    with the corpus's three most frequent herbs.
    """

    def __init__(self, corpus: Corpus):
        self.corpus = corpus
        self._pads = _top_frequent(corpus, 3)

    def _answer(self, prompt: str):
        if extract_verify_question(prompt) is not None:
            raise ProviderAnswerError("literal simulator supports inquiry only")
        name = _require_inquiry(prompt, "literal provider")
        drug = normalize_name(name)
        hits = [c for c in self.corpus.ingredient_pool if c in drug]
        hits.sort(key=lambda c: (drug.find(c), -len(c), c))
        answer = hits + [pad for pad in self._pads if pad not in hits]
        return render_ingredient_list([self.corpus.display_form(c) for c in answer]), None


class CommonHerbProvider(Provider):
    """Always names the m most frequent herbs; always confirms on verify."""

    def __init__(self, corpus: Corpus, m: int):
        if m < 1:
            raise ProviderConfigError("common_herb m must be >= 1")
        self.corpus = corpus
        self._top = _top_frequent(corpus, m)

    def _answer(self, prompt: str):
        if extract_verify_question(prompt) is not None:
            return YES_TEXT, None
        _require_inquiry(prompt, "common-herb provider")
        return render_ingredient_list([self.corpus.display_form(c) for c in self._top]), None


class BiasedVerifier(Provider):
    """Fixed or coin-flip verification answers (verify only).

    The bernoulli mode hashes (seed, prompt) so answers are independent of
    call order and concurrency.
    """

    def __init__(self, mode: str, p: float = 0.5, seed: int = 0):
        if mode not in BIASED_MODES:
            raise ProviderConfigError(f"biased mode must be one of {BIASED_MODES}, got {mode!r}")
        if mode == "bernoulli" and not (0.0 <= p <= 1.0):
            raise ProviderConfigError(f"bernoulli p must lie in [0, 1], got {p}")
        self.mode = mode
        self.p = p
        self.seed = seed

    def _answer(self, prompt: str):
        if extract_verify_question(prompt) is None:
            raise ProviderAnswerError("biased verifier supports verification only")
        if self.mode == "always_yes":
            return YES_TEXT, None
        if self.mode == "always_no":
            return NO_TEXT, None
        digest = hashlib.sha256(f"{self.seed}:{prompt}".encode("utf-8")).digest()
        draw = int.from_bytes(digest[:8], "big") / 2**64
        return (YES_TEXT if draw < self.p else NO_TEXT), None


class FixedConfusionProvider(Provider):
    """Realizes an exact confusion matrix over a known dataset (verify only).

    Which items land in which cell is shuffled by seed; row sums must match
    the dataset's T/F counts. Used to validate the metrics pipeline against
    published result rows.
    """

    def __init__(self, dataset: EvalDataset, confusion: Sequence[int], seed: int = 0):
        counts = tuple(int(c) for c in confusion)
        if len(counts) != 4 or any(c < 0 for c in counts):
            raise ProviderConfigError("confusion must be four non-negative ints (tp, fp, fn, tn)")
        tp, fp, fn, tn = counts
        t_names = [it.drug_name for it in dataset.items if it.subset == "T"]
        f_names = [it.drug_name for it in dataset.items if it.subset == "F"]
        if tp + fn != len(t_names):
            raise ProviderConfigError(
                f"tp + fn = {tp + fn} does not match the dataset's {len(t_names)} T items"
            )
        if fp + tn != len(f_names):
            raise ProviderConfigError(
                f"fp + tn = {fp + tn} does not match the dataset's {len(f_names)} F items"
            )
        rng = random.Random(seed)
        rng.shuffle(t_names)
        rng.shuffle(f_names)
        self._yes_names = set(t_names[:tp]) | set(f_names[:fp])
        self._known = set(t_names) | set(f_names)

    def _answer(self, prompt: str):
        parsed = extract_verify_question(prompt)
        if parsed is None:
            raise ProviderAnswerError("fixed-confusion provider supports verification only")
        name = normalize_name(parsed[0])
        if name not in self._known:
            raise ProviderAnswerError(f"fixed-confusion provider has no assignment for {name!r}")
        return (YES_TEXT if name in self._yes_names else NO_TEXT), None


class RemoteProvider(Provider):
    """Chat-completions HTTP client with bounded concurrency and retries.

    Request body: model, messages ([{role: "user", content: prompt}]),
    temperature. Response text comes from the first choice's message content.
    Transport failures and 429/5xx retry with exponential backoff; other
    non-2xx statuses and malformed bodies return structured errors.
    """

    backoff_base = 0.5

    def __init__(self, config: ProviderConfig, session: Optional[requests.Session] = None):
        config.validate()
        if config.kind != "remote":
            raise ProviderConfigError(f"RemoteProvider got kind {config.kind!r}")
        self.config = config
        self.session = session or requests.Session()
        self._gate = threading.BoundedSemaphore(config.concurrency_limit)

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, prompt: str) -> ProviderResponse:
        body = {
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
        }
        start = time.perf_counter()
        last_error = "no attempt made"
        for attempt in range(self.config.retries + 1):
            if attempt > 0 and self.backoff_base > 0:
                time.sleep(self.backoff_base * 2 ** (attempt - 1))
            try:
                with self._gate:
                    resp = self.session.post(
                        self.config.endpoint_url,
                        json=body,
                        headers=self._headers(),
                        timeout=self.config.timeout,
                    )
            except requests.RequestException as exc:
                last_error = f"transport failure: {exc}"
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = f"retryable status {resp.status_code}"
                continue
            elapsed = time.perf_counter() - start
            if not (200 <= resp.status_code < 300):
                return ProviderResponse(
                    raw_text=None, latency=elapsed, error=f"status {resp.status_code}"
                )
            try:
                text = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError):
                return ProviderResponse(
                    raw_text=None, latency=elapsed, error="malformed response body"
                )
            if not isinstance(text, str):
                return ProviderResponse(
                    raw_text=None, latency=elapsed, error="non-string message content"
                )
            return ProviderResponse(raw_text=text, latency=elapsed)
        return ProviderResponse(
            raw_text=None,
            latency=time.perf_counter() - start,
            error=f"gave up after {self.config.retries + 1} attempts: {last_error}",
        )


class RagProvider(Provider):
    """Prepends top-k retrieved entries to the prompt, then delegates.

    The retrieval query is the drug name for inquiry and the drug name plus
    the joined candidate list for verification; unparseable prompts fall back
    to the raw prompt as query. Retrieval happens per call.
    """

    def __init__(self, inner: Provider, index: Index, k: int = DEFAULT_TOP_K, lang: str = "zh"):
        if k < 1:
            raise ProviderConfigError("rag k must be >= 1")
        self.inner = inner
        self.index = index
        self.k = k
        self.lang = lang

    def _query(self, prompt: str) -> str:
        verify = extract_verify_question(prompt)
        if verify is not None:
            name, presented = verify
            return name + "、" + "、".join(presented) if presented else name
        name = extract_inquiry_question(prompt)
        return name if name is not None else prompt

    def complete(self, prompt: str) -> ProviderResponse:
        start = time.perf_counter()
        entries = search(self.index, self._query(prompt), k=self.k)
        if not entries:
            log.warning("rag wrapper: empty retrieval context for prompt %.60r", prompt)
        context = "\n\n".join(entry.rendered_text for entry in entries)
        wrapped = build_rag_prompt(context, prompt, self.lang)
        response = self.inner.complete(wrapped)
        response.retrieval_context = entries
        response.latency = time.perf_counter() - start
        return response


def rag_wrap(inner: Provider, index: Index, k: int = DEFAULT_TOP_K, lang: str = "zh") -> RagProvider:
    return RagProvider(inner, index, k=k, lang=lang)


def make_provider(
    config: ProviderConfig,
    *,
    corpus: Optional[Corpus] = None,
    index: Optional[Index] = None,
    dataset: Optional[EvalDataset] = None,
) -> Provider:
    """Instantiate a provider, supplying whichever resources its kind needs."""
    config.validate()
    kind = config.kind

    def need_corpus() -> Corpus:
        if corpus is None:
            raise ProviderConfigError(f"provider kind {kind!r} requires a corpus")
        return corpus

    def need_index() -> Index:
        nonlocal index
        if index is None:
            index = build_index(need_corpus())
        return index

    if kind == "remote":
        return RemoteProvider(config)
    if kind == "oracle":
        return OracleProvider(need_corpus(), match_markers=config.match_markers)
    if kind == "grounded":
        return GroundedProvider(need_index(), match_markers=config.match_markers)
    if kind == "literal":
        return LiteralProvider(need_corpus())
    if kind == "common_herb":
        return CommonHerbProvider(need_corpus(), config.top_m)
    if kind == "biased":
        return BiasedVerifier(config.mode, p=config.p, seed=config.seed)
    if kind == "fixed_confusion":
        if dataset is None:
            raise ProviderConfigError("fixed_confusion provider requires the dataset")
        return FixedConfusionProvider(dataset, config.confusion, seed=config.seed)
    if kind == "rag":
        inner = make_provider(config.inner, corpus=corpus, index=index, dataset=dataset)
        return RagProvider(inner, need_index(), k=config.k, lang=config.lang)
    raise ProviderConfigError(f"unknown provider kind {kind!r}")
