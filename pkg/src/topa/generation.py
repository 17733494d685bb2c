"""LLM-driven Tideo generation: condition sampling, prompting, parsing, shard writing.

Generation is provider-agnostic.  A client is any object with a
``complete(prompt, attempt, params) -> str`` method.  Two ship here:

* :class:`FixtureClient` replays recorded ``{prompt_sha256, response_text}``
  pairs, so the whole pipeline runs offline and deterministically.
* :class:`HTTPClient` posts prompts to a JSON endpoint under a token-bucket
  rate limit.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .data import (
    ANNOTATIONS_FILE,
    TIDEOS_FILE,
    ConditionRecord,
    Tideo,
    TideoAnnotation,
    annotation_to_record,
    dumps_line,
    iter_jsonl,
    normalize_option,
    tideo_to_record,
    validate_annotation,
    validate_tideo,
)
from .errors import (
    ClientExhausted,
    EmptySource,
    GenerationRejected,
    MissingTemplate,
    SchemaViolation,
    UnfilledPlaceholder,
    UnparseableStructure,
)

log = logging.getLogger(__name__)

GENERATION_SOURCES = ("video_title", "video_caption", "ego_scenario", "object_lexicon")

# Relative sizes of the four condition pools in the released corpus (thousands of Tideos).
DEFAULT_CONDITION_COUNTS = {"video_title": 213, "video_caption": 183, "ego_scenario": 205, "object_lexicon": 120}


def default_condition_weights() -> dict[str, float]:
    total = sum(DEFAULT_CONDITION_COUNTS.values())
    return {k: v / total for k, v in DEFAULT_CONDITION_COUNTS.items()}


PLACEHOLDER = "{seed}"
EGOCENTRIC_INSTRUCTION = "mimic an ego-centric video"

TASK_PROMPT = """\
You are simulating the keyframes of a video using text only. Write a textual video \
of 5 to 15 sequential frames. For each frame, write a frame caption and short \
captions of the main objects in the frame. Then write a dense description of the \
whole video, followed by several multiple-choice questions about the video. Each \
question has 2 to 5 options and exactly one correct answer.

Use exactly this format:
Frame 1: <frame caption>
Objects: <object caption>; <object caption>
Frame 2: <frame caption>
Objects: <object caption>
...
Description: <dense description of the whole video>
Question 1: <question>
(A) <option>
(B) <option>
(C) <option>
Answer: (<letter>)
"""

DEFAULT_TEMPLATES: dict[str, str] = {
    "video_title": TASK_PROMPT + "\nThe video is titled: {seed}\n",
    "video_caption": TASK_PROMPT + "\nThe video is described by this caption: {seed}\n",
    "ego_scenario": TASK_PROMPT + (
        "\nThe textual video should " + EGOCENTRIC_INSTRUCTION + ", recorded by a camera "
        "worn by a person and described from the first-person view. "
        "The camera wearer's activity: {seed}\n"),
    "object_lexicon": TASK_PROMPT + "\nThe video should feature this object: {seed}\n",
}


@dataclass(frozen=True)
class GenerationJob:
    index: int
    condition: ConditionRecord
    prompt_text: str
    attempt: int = 0
    sampling_params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.condition.seed_text not in self.prompt_text:
            raise ValueError("prompt does not contain the seed text")


@dataclass(frozen=True)
class LLMClientConfig:
    endpoint: str = ""
    timeout_s: float = 60.0
    max_retries: int = 2
    rate_limit_per_min: float = 60.0
    credentials: str = "env:TOPA_LLM_API_KEY"
    concurrency: int = 1

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.rate_limit_per_min <= 0:
            raise ValueError("rate_limit_per_min must be > 0")


# -- conditions and prompts -----------------------------------------------


def sample_condition(sources: Mapping[str, Sequence[str]], weights: Mapping[str, float],
                     rng_seed: int) -> ConditionRecord:
    """Draw a source by weight, then a seed phrase uniformly within it."""
    tags = list(weights)
    probs = np.array([weights[t] for t in tags], dtype=float)
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be non-negative and sum to 1")
    for t, p in zip(tags, probs):
        if p > 0 and not sources.get(t):
            raise EmptySource(f"source {t!r} has no seeds")
    rng = np.random.default_rng(rng_seed)
    tag = tags[int(rng.choice(len(tags), p=probs))]
    pool = sources[tag]
    return ConditionRecord(tag, pool[int(rng.integers(len(pool)))])


def render_prompt(condition: ConditionRecord, template_set: Mapping[str, str] | None = None) -> str:
    templates = DEFAULT_TEMPLATES if template_set is None else template_set
    if condition.source_tag not in templates:
        raise MissingTemplate(condition.source_tag)
    template = templates[condition.source_tag]
    if template.count(PLACEHOLDER) != 1:
        raise UnfilledPlaceholder(
            f"template for {condition.source_tag!r} must contain {PLACEHOLDER} exactly once")
    return template.replace(PLACEHOLDER, condition.seed_text)


def job_seed(rng_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([rng_seed, index]).generate_state(1)[0])


def plan_jobs(sources, weights, count: int, rng_seed: int,
              template_set: Mapping[str, str] | None = None,
              sampling_params: Mapping[str, Any] | None = None) -> list[GenerationJob]:
    jobs = []
    for i in range(count):
        cond = sample_condition(sources, weights, job_seed(rng_seed, i))
        jobs.append(GenerationJob(i, cond, render_prompt(cond, template_set), 0, dict(sampling_params or {})))
    return jobs


def prompt_sha256(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


# -- response parsing ------------------------------------------------------

_FRAME = re.compile(r"^frame\s+(\d+)\s*[:.]\s*(.*)$", re.I)
_OBJECTS = re.compile(r"^objects?\s*:\s*(.*)$", re.I)
_DESC = re.compile(r"^(?:dense\s+)?description\s*:\s*(.*)$", re.I)
_QUESTION = re.compile(r"^question\s+(\d+)\s*[:.]\s*(.*)$", re.I)
_OPTION = re.compile(r"^\(([A-Ea-e])\)\s*:?\s*(.*)$")
_ANSWER = re.compile(r"^answer\s*:\s*\(?([A-Ea-e])\)?\.?\s*$", re.I)
_TYPE = re.compile(r"^type\s*:\s*(\w+)\s*$", re.I)


def caption_key(captions: Iterable[str]) -> str:
    """Dedup key: hash of the concatenated normalized frame captions."""
    joined = "\n".join(normalize_option(c) for c in captions)
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()


def _lines_with_offsets(text: str):
    offset = 0
    for line in text.splitlines(keepends=True):
        yield offset, line.strip()
        offset += len(line.encode("utf-8"))


def parse_generation(response_text: str, condition: ConditionRecord | None = None
                     ) -> tuple[Tideo, TideoAnnotation]:
    """Parse a model response into a validated (Tideo, TideoAnnotation) pair.

    Raises UnparseableStructure with the byte offset of the first line that
    breaks the expected layout, or GenerationRejected wrapping the schema
    violation (the raw response is kept on the exception).
    """
    condition = condition or ConditionRecord("synthetic_fixture", "unspecified")
    lines = [(o, s) for o, s in _lines_with_offsets(response_text) if s]
    end = len(response_text.encode("utf-8"))
    pos = 0

    def here() -> int:
        return lines[pos][0] if pos < len(lines) else end

    frames: list[dict] = []
    while pos < len(lines):
        m = _FRAME.match(lines[pos][1])
        if not m:
            break
        if int(m.group(1)) != len(frames) + 1:
            raise UnparseableStructure(here(), f"expected frame {len(frames) + 1}")
        frame = {"caption": m.group(2).strip(), "object_captions": []}
        pos += 1
        if pos < len(lines):
            om = _OBJECTS.match(lines[pos][1])
            if om:
                frame["object_captions"] = [o.strip() for o in om.group(1).split(";") if o.strip()]
                pos += 1
        frames.append(frame)
    if not frames:
        raise UnparseableStructure(here(), "no frames found")

    dm = _DESC.match(lines[pos][1]) if pos < len(lines) else None
    if not dm:
        raise UnparseableStructure(here(), "missing description section")
    description = dm.group(1).strip()
    pos += 1

    qa: list[dict] = []
    while pos < len(lines):
        qm = _QUESTION.match(lines[pos][1])
        if not qm:
            raise UnparseableStructure(here(), "expected a question")
        item: dict[str, Any] = {"question": qm.group(2).strip(), "options": []}
        pos += 1
        letters = []
        while pos < len(lines) and (om := _OPTION.match(lines[pos][1])):
            letters.append(om.group(1).upper())
            item["options"].append(om.group(2).strip())
            pos += 1
        if letters != [chr(ord("A") + k) for k in range(len(letters))] or not letters:
            raise UnparseableStructure(here(), "options must be lettered (A), (B), ... in order")
        am = _ANSWER.match(lines[pos][1]) if pos < len(lines) else None
        if not am:
            raise UnparseableStructure(here(), "missing answer line")
        item["answer_index"] = ord(am.group(1).upper()) - ord("A")
        pos += 1
        if pos < len(lines) and (tm := _TYPE.match(lines[pos][1])):
            item["question_type"] = tm.group(1).lower()
            pos += 1
        qa.append(item)
    if not qa:
        raise UnparseableStructure(end, "no questions found")

    tid = "tv-" + caption_key(f["caption"] for f in frames)[:16]
    raw_tideo = {"id": tid, "source_tag": condition.source_tag,
                 "condition": {"source_tag": condition.source_tag, "seed_text": condition.seed_text},
                 "frames": frames}
    raw_ann = {"tideo_id": tid, "dense_description": description, "qa": qa}
    try:
        tideo = validate_tideo(raw_tideo)
        return tideo, validate_annotation(raw_ann, tideo)
    except SchemaViolation as exc:
        raise GenerationRejected(exc, response_text) from exc


def format_generation(tideo: Tideo, annotation: TideoAnnotation) -> str:
    """Render a pair in the response layout the prompts ask for (inverse of parse)."""
    out = []
    for i, f in enumerate(tideo.frames, 1):
        out.append(f"Frame {i}: {f.caption}")
        if f.object_captions:
            out.append("Objects: " + "; ".join(f.object_captions))
    out.append(f"Description: {annotation.dense_description}")
    for k, q in enumerate(annotation.qa_items, 1):
        out.append(f"Question {k}: {q.question}")
        out.extend(f"({chr(65 + j)}) {o}" for j, o in enumerate(q.options))
        out.append(f"Answer: ({chr(65 + q.answer_index)})")
    return "\n".join(out) + "\n"


# -- clients ---------------------------------------------------------------


class LLMClient(Protocol):
    def complete(self, prompt: str, attempt: int, params: Mapping[str, Any]) -> str: ...


class FixtureClient:
    """Replays recorded responses keyed by prompt hash; attempt k gets the k-th recording."""

    def __init__(self, records: Iterable[Mapping[str, str]]):
        self._responses: dict[str, list[str]] = {}
        for r in records:
            self._responses.setdefault(r["prompt_sha256"], []).append(r["response_text"])

    @classmethod
    def from_file(cls, path) -> "FixtureClient":
        return cls(iter_jsonl(path))

    def complete(self, prompt: str, attempt: int = 0, params: Mapping[str, Any] | None = None) -> str:
        recorded = self._responses.get(prompt_sha256(prompt), [])
        if attempt >= len(recorded):
            raise ClientExhausted(f"no recorded response for prompt {prompt_sha256(prompt)[:12]} "
                                  f"attempt {attempt}")
        return recorded[attempt]


class TokenBucket:
    def __init__(self, rate_per_min: float, capacity: float | None = None):
        self.rate = rate_per_min / 60.0
        self.capacity = capacity if capacity is not None else max(1.0, self.rate)
        self.tokens = self.capacity
        self.stamp = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self.tokens = min(self.capacity, self.tokens + (now - self.stamp) * self.rate)
                self.stamp = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            time.sleep(wait)


def resolve_secret(reference: str) -> str | None:
    """Resolve ``env:NAME`` or ``file:PATH`` secret references."""
    kind, _, value = reference.partition(":")
    if kind == "env":
        return os.environ.get(value) or None
    if kind == "file":
        p = Path(value).expanduser()
        return p.read_text().strip() if p.exists() else None
    raise ValueError(f"unsupported credential reference {reference!r}")


class HTTPClient:
    """POSTs ``{"prompt", "attempt", **params}`` as JSON; expects ``{"text": ...}`` back.

    Credentials are resolved at construction so a missing key fails before any
    request is made.  HTTP 429/402 responses raise ClientExhausted.
    """

    def __init__(self, config: LLMClientConfig):
        import requests

        if not config.endpoint:
            raise ValueError("HTTP client needs an endpoint")
        self._key = resolve_secret(config.credentials)
        if not self._key:
            raise ClientExhausted(f"missing credentials ({config.credentials})")
        self.config = config
        self._bucket = TokenBucket(config.rate_limit_per_min)
        self._session = requests.Session()

    def complete(self, prompt: str, attempt: int = 0, params: Mapping[str, Any] | None = None) -> str:
        self._bucket.acquire()
        body = {"prompt": prompt, "attempt": attempt, **dict(params or {})}
        resp = self._session.post(self.config.endpoint, json=body, timeout=self.config.timeout_s,
                                  headers={"Authorization": f"Bearer {self._key}"})
        if resp.status_code in (402, 429):
            raise ClientExhausted(f"provider refused request: HTTP {resp.status_code}")
        resp.raise_for_status()
        return resp.json()["text"]


# -- pipeline --------------------------------------------------------------


@dataclass
class GenerationReport:
    requested: int = 0
    accepted: int = 0
    rejected: int = 0
    retried: int = 0
    dedup: int = 0
    exhausted: bool = False
    rejections: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


class ShardAppender:
    """Serializes whole-line appends to the two shard files."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._tideos = open(self.directory / TIDEOS_FILE, "a", encoding="utf-8")
        self._anns = open(self.directory / ANNOTATIONS_FILE, "a", encoding="utf-8")
        self._lock = threading.Lock()

    def append(self, tideo: Tideo, annotation: TideoAnnotation) -> None:
        t_line = dumps_line(tideo_to_record(tideo))
        a_line = dumps_line(annotation_to_record(annotation))
        with self._lock:
            self._tideos.write(t_line)
            self._tideos.flush()
            self._anns.write(a_line)
            self._anns.flush()

    def close(self) -> None:
        self._tideos.close()
        self._anns.close()


def _attempt_job(job: GenerationJob, client, max_retries: int):
    """Run one job with retries. Returns (pair | None, retries, failures)."""
    failures = []
    for attempt in range(max_retries + 1):
        params = dict(job.sampling_params, seed=job_seed(job.index, attempt))
        text = client.complete(job.prompt_text, attempt, params)
        try:
            return parse_generation(text, job.condition), attempt, failures
        except (UnparseableStructure, GenerationRejected) as exc:
            failures.append({"job": job.index, "attempt": attempt, "reason": str(exc),
                             "response_text": text})
    return None, max_retries, failures


def run_generation(sources, weights, count: int, client, rng_seed: int, out_dir,
                   template_set: Mapping[str, str] | None = None, max_retries: int = 0,
                   concurrency: int = 1, sampling_params: Mapping[str, Any] | None = None
                   ) -> tuple[Path, GenerationReport]:
    """Generate ``count`` jobs into a shard under ``out_dir``.

    Responses are consumed in job order regardless of ``concurrency`` so the
    shard is identical for identical inputs.  On ClientExhausted the partial
    shard is kept and ``report.exhausted`` is set.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in (TIDEOS_FILE, ANNOTATIONS_FILE):
        (out_dir / name).write_text("", encoding="utf-8")
    report = GenerationReport(requested=count)
    jobs = plan_jobs(sources, weights, count, rng_seed, template_set, sampling_params) if count else []
    seen: set[str] = set()
    appender = ShardAppender(out_dir)
    try:
        with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
            futures = [pool.submit(_attempt_job, job, client, max_retries) for job in jobs]
            for fut in futures:
                try:
                    pair, retries, failures = fut.result()
                except ClientExhausted as exc:
                    log.warning("client exhausted: %s", exc)
                    report.exhausted = True
                    for f in futures:
                        f.cancel()
                    break
                report.retried += retries if pair is not None else max_retries
                report.rejections.extend(failures if pair is None else [])
                if pair is None:
                    report.rejected += 1
                    continue
                key = caption_key(f.caption for f in pair[0].frames)
                if key in seen:
                    report.dedup += 1
                    continue
                seen.add(key)
                appender.append(*pair)
                report.accepted += 1
    finally:
        appender.close()
    with open(out_dir / "rejected.jsonl", "w", encoding="utf-8") as fh:
        for r in report.rejections:
            fh.write(dumps_line(r))
    return out_dir, report


def write_fixtures(path, records: Iterable[Mapping[str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"prompt_sha256": r["prompt_sha256"],
                                 "response_text": r["response_text"]}, ensure_ascii=False) + "\n")
