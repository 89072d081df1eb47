"""Prompt construction, response parsing, and the concurrent protocol runner.

Two protocols exist. ``inquiry`` asks for a drug's ingredient list and parses
a name list out of free text; ``verify`` presents a candidate list and parses
a Yes/No decision. Chinese templates are canonical; English ones sit behind
``lang="en"``.
"""

from __future__ import annotations

import datetime as _dt
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence

from tcmeval import __version__
from tcmeval.corpus import CorpusError, fold_fullwidth, parse_ingredient
from tcmeval.dataset import EvalDataset, EvalItem

PROTOCOLS = ("inquiry", "verify")


class RunLogError(ValueError):
    """Malformed run log, or a resume target that does not match the dataset."""


INQUIRY_TEMPLATE_ZH = (
    "你是一名资深中医专家。请给出药物：{name}的组成成分。"
    "只回答各成分的名称即可。无需给出用量或制备流程。"
)
INQUIRY_TEMPLATE_EN = (
    "What are the ingredients of the drug {name}? "
    "Only give a list of the names of the ingredients please. "
    "No need to give dosages or the production workflow."
)
VERIFY_TEMPLATE_ZH = (
    "作为一个资深中医药专家，请回答如下问题。"
    "请问，药物：{name}的组成成分是否为：{ingredients}？只需回答“是”或“否”。"
)
VERIFY_TEMPLATE_EN = (
    "Whether the drug {name} consists of {ingredients}? "
    'Only respond with "Yes" or "No", please.'
)

RAG_TEMPLATE_ZH = """已知信息：{context}

“你是一个资深的中医与中医药学专家，你具备管理大量药物处方和药材识别的能力；请注意我向你提供了很多《中华人民共和国药典》PDF文件中的内容，但每个PDF文件中包括药方、制备方法、药材特性等内容，请仔细识别各个信息。

现在需要你帮我分析每个中药或中成药的组成成分，只需要为我提供药典中此药品的各个组成成分药材名称即可，无需给出制备方法或用量等详细信息。然后帮我完成以下两个功能：

1.当我给出一个中药名称和一组组成配方表时，给出其正确与否的答案。当基于我提供的药典信息，你认为问题中给出的配方不正确或者不匹配所提供药名时，只需回答“否”，反之，只需回答“是”即可。

2.当我只给出一个中药名称时，请给出你认为此药物正确的配方表，只需要包含成分的药材名称即可，无需具体含量和制备过程。

请务必注意：

有些药物的名称中可能含有类似中医药材但实际上不是药材的名称，切记不要望文生义；

有些药材经常用于制备药物，切记要根据所提供的内容谨慎地判断这些常见药材是否在当前给出的药物中也存在；

请仔细识别药物成分，不要重复给出药材名称。”

请回答以下问题：{question}"""

RAG_TEMPLATE_EN = """Given the information: {context}

"You are a senior expert in traditional Chinese medicine and pharmacology, with the ability to manage a large number of drug prescriptions and identify medicinal materials. Please note that I have provided you with extensive content from PDF files of the Pharmacopoeia of the People's Republic of China, each containing information such as prescriptions, preparation methods, and characteristics of medicinal materials. Please carefully identify each piece of information.

Now, I need you to help me analyze the composition of each traditional Chinese drug or Chinese proprietary medicine. Simply provide me with the names of the constituent medicinal materials listed in the Pharmacopoeia for each drug, without including details such as preparation methods or dosages. Then, assist me in completing the following two tasks:

1. When I provide the name of a traditional Chinese drug and a set of constituent ingredients, give a correct or incorrect answer. Based on the Pharmacopoeia information I have provided, if you determine that the given ingredients in the question are incorrect or do not match the provided drug name, simply respond with "No". Otherwise, reply "Yes".

2. When I only provide the name of a traditional Chinese drug, please give what you believe to be the correct list of ingredients for this medicine. Only include the names of the constituent medicinal materials, without specific quantities or preparation processes.

Please pay close attention to the following:

Some drug names may contain terms that resemble traditional Chinese medicinal materials but are not actual medicinal materials. Do not interpret them literally.

Some medicinal materials are commonly used in drug preparation. Be cautious in determining whether these common materials are present in the currently given medicine based on the provided content.

Carefully identify the drug components and avoid repeating the names of medicinal materials."

Please answer the following question: {question}"""


def _pick(lang: str, zh: str, en: str) -> str:
    if lang == "zh":
        return zh
    if lang == "en":
        return en
    raise ValueError(f"unknown lang {lang!r}, expected 'zh' or 'en'")


def render_ingredient_list(names: Sequence[str]) -> str:
    """Bracketed single-quoted rendering, e.g. ['垂盆草', '丹参']."""
    return "[" + ", ".join(f"'{name}'" for name in names) + "]"


def build_inquiry_prompt(drug_name: str, lang: str = "zh") -> str:
    return _pick(lang, INQUIRY_TEMPLATE_ZH, INQUIRY_TEMPLATE_EN).format(name=drug_name)


def build_verify_prompt(drug_name: str, ingredients: Sequence[str], lang: str = "zh") -> str:
    if not ingredients:
        raise ValueError("verify prompt needs a non-empty ingredient list")
    rendered = render_ingredient_list(ingredients)
    return _pick(lang, VERIFY_TEMPLATE_ZH, VERIFY_TEMPLATE_EN).format(
        name=drug_name, ingredients=rendered
    )


def build_rag_prompt(context: str, question: str, lang: str = "zh") -> str:
    return _pick(lang, RAG_TEMPLATE_ZH, RAG_TEMPLATE_EN).format(
        context=context, question=question
    )


def build_prompt(item: EvalItem, protocol: str, lang: str = "zh") -> str:
    if protocol == "inquiry":
        return build_inquiry_prompt(item.drug_name, lang)
    if protocol == "verify":
        return build_verify_prompt(item.drug_name, item.presented_ingredients, lang)
    raise ValueError(f"unknown protocol {protocol!r}")


# Inverse templates. Simulated providers recover the question from the prompt
# they receive; the LAST match wins so retrieval-wrapped prompts (question at
# the end, context above) parse correctly.
_VERIFY_Q = (
    re.compile(r"药物：(.+?)的组成成分是否为：(\[.*?\])？"),
    re.compile(r"[Ww]hether the drug (.+?) consists of (\[.*?\])\?"),
)
_INQUIRY_Q = (
    re.compile(r"药物：(.+?)的组成成分"),
    re.compile(r"ingredients of the drug (.+?)\?"),
)


def extract_verify_question(prompt: str) -> Optional[tuple[str, list[str]]]:
    """Recover (drug_name, presented tokens) from a verify prompt, or None."""
    for pattern in _VERIFY_Q:
        matches = list(pattern.finditer(prompt))
        if matches:
            name, payload = matches[-1].groups()
            return name, extract_name_tokens(payload)
    return None


def extract_inquiry_question(prompt: str) -> Optional[str]:
    """Recover the drug name from an inquiry prompt, or None."""
    for pattern in _INQUIRY_Q:
        matches = list(pattern.finditer(prompt))
        if matches:
            return matches[-1].group(1)
    return None


_THINK = re.compile(r"<think>.*?</think>", re.DOTALL)

# Separators that end a name token: enumeration commas, list punctuation,
# quotes, sentence enders. Parentheses are NOT separators; they carry
# processing markers.
_SEPARATORS = re.compile(r"[、，,;；:：\[\]【】'‘’\"“”`。！？!?\s]+")
_BULLET = re.compile(r"(?m)^\s*[0-9０-９]+[\.、．)）]\s*")


def strip_think_block(text: str) -> str:
    """Drop well-formed <think>...</think> spans."""
    return _THINK.sub(" ", text)


def extract_name_tokens(text: str) -> list[str]:
    """Name tokens in order, duplicates preserved, markers kept.

    Tokens that normalize to nothing (stray punctuation, bare markers) are
    dropped rather than treated as fatal. Full-width punctuation folds first
    so e.g. ［ and ＇ act as list separators too.
    """
    cleaned = fold_fullwidth(strip_think_block(text or ""))
    cleaned = _BULLET.sub(" ", cleaned)
    tokens = []
    for chunk in _SEPARATORS.split(cleaned):
        if not chunk:
            continue
        try:
            tokens.append(parse_ingredient(chunk).raw)
        except CorpusError:
            continue
    return tokens


def parse_ingredient_list(raw_response: str) -> list[str]:
    """Canonical ingredient names from a free-text inquiry response."""
    return [parse_ingredient(tok).canonical for tok in extract_name_tokens(raw_response)]


# 不是 must come first so the negation swallows its 是; ASCII lookarounds
# approximate word boundaries next to CJK text, where \b misfires.
_DECISION = re.compile(r"不是|是|否|(?<![a-zA-Z])(?:yes|no)(?![a-zA-Z])", re.IGNORECASE)
_NO_TOKENS = {"不是", "否", "no"}


def parse_yes_no(raw_response: str) -> str:
    """Map a verify response to Yes/No/Invalid; the last decision token wins."""
    cleaned = strip_think_block(raw_response or "")
    verdict = None
    for match in _DECISION.finditer(cleaned):
        token = match.group(0).lower()
        verdict = "No" if token in _NO_TOKENS else "Yes"
    return verdict if verdict is not None else "Invalid"


@dataclass
class RunRecord:
    """Outcome of one provider call.

    ``parsed`` is a canonical name list for inquiry and Yes/No/Invalid for
    verify; ``parsed_tokens`` additionally keeps inquiry tokens with their
    processing markers so marker-aware scoring stays possible.
    """

    item_id: int
    protocol: str
    prompt: str
    raw_response: str
    parsed: Any
    latency: float
    retrieval_context: Optional[list[dict]] = None
    parsed_tokens: Optional[list[str]] = None
    error: Optional[str] = None


@dataclass
class RunLog:
    records: list[RunRecord]
    provider_config: dict
    dataset_fingerprint: str
    protocol: str
    lang: str = "zh"
    started: str = ""
    finished: str = ""

    def error_rate(self) -> float:
        if not self.records:
            return 0.0
        return sum(1 for r in self.records if r.error is not None) / len(self.records)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _record_to_obj(rec: RunRecord) -> dict:
    obj = {
        "item_id": rec.item_id,
        "protocol": rec.protocol,
        "prompt": rec.prompt,
        "raw_response": rec.raw_response,
        "parsed": rec.parsed,
        "latency": rec.latency,
    }
    if rec.retrieval_context is not None:
        obj["retrieval_context"] = rec.retrieval_context
    if rec.parsed_tokens is not None:
        obj["parsed_tokens"] = rec.parsed_tokens
    if rec.error is not None:
        obj["error"] = rec.error
    return obj


def _record_from_obj(obj: dict, context: str) -> RunRecord:
    try:
        return RunRecord(
            item_id=int(obj["item_id"]),
            protocol=obj["protocol"],
            prompt=obj["prompt"],
            raw_response=obj["raw_response"],
            parsed=obj["parsed"],
            latency=float(obj["latency"]),
            retrieval_context=obj.get("retrieval_context"),
            parsed_tokens=obj.get("parsed_tokens"),
            error=obj.get("error"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise RunLogError(f"{context}bad record: {exc}") from exc


def save_runlog(log: RunLog, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"meta": _meta_obj(log)}, ensure_ascii=False) + "\n")
        for rec in log.records:
            fh.write(json.dumps(_record_to_obj(rec), ensure_ascii=False) + "\n")


def _meta_obj(log: RunLog) -> dict:
    return {
        "tool_version": __version__,
        "protocol": log.protocol,
        "lang": log.lang,
        "dataset_fingerprint": log.dataset_fingerprint,
        "provider_config": log.provider_config,
        "started": log.started,
        "finished": log.finished,
    }


def load_runlog(path: str | Path) -> RunLog:
    """Read a run log; meta lines merge (later keys win), records keep order."""
    meta: dict = {}
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            context = f"{path}:{lineno}: "
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RunLogError(f"{context}invalid JSON: {exc}") from exc
            if "meta" in obj:
                meta.update(obj["meta"])
            elif "item_id" in obj:
                records.append(_record_from_obj(obj, context))
            else:
                raise RunLogError(f"{context}line is neither meta nor record")
    if not meta:
        raise RunLogError(f"{path}: missing meta header")
    for key in ("protocol", "dataset_fingerprint"):
        if key not in meta:
            raise RunLogError(f"{path}: meta missing {key!r}")
    return RunLog(
        records=records,
        provider_config=meta.get("provider_config", {}),
        dataset_fingerprint=meta["dataset_fingerprint"],
        protocol=meta["protocol"],
        lang=meta.get("lang", "zh"),
        started=meta.get("started", ""),
        finished=meta.get("finished", ""),
    )


def _parse_response(protocol: str, raw_text: Optional[str]) -> tuple[Any, Optional[list[str]]]:
    if raw_text is None:
        # provider error: verify counts as Invalid, inquiry as empty
        return ("Invalid", None) if protocol == "verify" else ([], [])
    if protocol == "verify":
        return parse_yes_no(raw_text), None
    tokens = extract_name_tokens(raw_text)
    return [parse_ingredient(tok).canonical for tok in tokens], tokens


def run_protocol(
    dataset: EvalDataset,
    provider,
    protocol: str,
    concurrency_limit: int = 1,
    *,
    lang: str = "zh",
    log_path: Optional[str | Path] = None,
    resume: bool = False,
    provider_config: Optional[dict] = None,
) -> RunLog:
    """Run one protocol over every dataset item.

    Up to ``concurrency_limit`` provider calls are in flight at once; results
    are consumed and logged in presentation order regardless of completion
    order. With ``log_path`` the log is written incrementally (one flushed
    line per record); ``resume=True`` skips item_ids already present in an
    existing log for the same dataset.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}, expected one of {PROTOCOLS}")
    if concurrency_limit < 1:
        raise ValueError(f"concurrency_limit must be >= 1, got {concurrency_limit}")
    dataset_fp = dataset.fingerprint()
    existing: dict[int, RunRecord] = {}
    mode = "w"
    if log_path is not None and resume and Path(log_path).exists():
        prior = load_runlog(log_path)
        if prior.dataset_fingerprint != dataset_fp:
            raise RunLogError(
                f"{log_path}: resume target belongs to a different dataset "
                f"({prior.dataset_fingerprint[:12]}… != {dataset_fp[:12]}…)"
            )
        if prior.protocol != protocol:
            raise RunLogError(f"{log_path}: resume target ran protocol {prior.protocol!r}")
        existing = {rec.item_id: rec for rec in prior.records}
        mode = "a"

    started = _now()
    log = RunLog(
        records=[],
        provider_config=dict(provider_config or {}),
        dataset_fingerprint=dataset_fp,
        protocol=protocol,
        lang=lang,
        started=started,
    )

    def execute(item: EvalItem) -> RunRecord:
        prompt = build_prompt(item, protocol, lang)
        try:
            response = provider.complete(prompt)
        except Exception as exc:  # provider bugs must not kill the run
            return RunRecord(
                item_id=item.item_id,
                protocol=protocol,
                prompt=prompt,
                raw_response="",
                parsed="Invalid" if protocol == "verify" else [],
                latency=0.0,
                parsed_tokens=None if protocol == "verify" else [],
                error=f"provider raised {type(exc).__name__}: {exc}",
            )
        parsed, tokens = _parse_response(protocol, response.raw_text)
        context = None
        if response.retrieval_context is not None:
            context = [
                {"doc_id": e.doc_id, "drug_name": e.drug_name, "score": e.score}
                for e in response.retrieval_context
            ]
        return RunRecord(
            item_id=item.item_id,
            protocol=protocol,
            prompt=prompt,
            raw_response=response.raw_text if response.raw_text is not None else "",
            parsed=parsed,
            latency=response.latency,
            retrieval_context=context,
            parsed_tokens=tokens,
            error=response.error,
        )

    pending = [item for item in dataset.items if item.item_id not in existing]
    fh = None
    if log_path is not None:
        fh = open(log_path, mode, encoding="utf-8")
        if mode == "w":
            fh.write(json.dumps({"meta": _meta_obj(log)}, ensure_ascii=False) + "\n")
            fh.flush()
    fresh: dict[int, RunRecord] = {}
    try:
        with ThreadPoolExecutor(max_workers=concurrency_limit) as pool:
            futures = [(item, pool.submit(execute, item)) for item in pending]
            for item, future in futures:
                rec = future.result()
                fresh[rec.item_id] = rec
                if fh is not None:
                    fh.write(json.dumps(_record_to_obj(rec), ensure_ascii=False) + "\n")
                    fh.flush()
    finally:
        if fh is not None:
            fh.close()
    merged = {**existing, **fresh}
    log.records = [merged[item.item_id] for item in dataset.items]
    log.finished = _now()
    return log
