"""Retrieval-grounded verdicts: evidence prompt, verdict providers, fusion, parsing and audit."""
from __future__ import annotations

import json
import math
import os
import re
import threading
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol, Sequence

from .archive import PopulationArchive, RetrievalResult, search
from .errors import ConfigError, ProviderError

SUCCESS = "SUCCESS"
FAILURE = "FAILURE"
UNPARSEABLE = "UNPARSEABLE"
OUTCOME_WORDS = {0: "favourable", 1: "unfavourable"}

SYSTEM_TEXT = (
    "You are an expert epileptologist reviewing a post-operative imaging trajectory. "
    "Judge only from the retrieved historical matches listed in the prompt. "
    "Begin your reply with exactly one token, SUCCESS or FAILURE, followed by one "
    "sentence of justification citing matches by their # number."
)

URL_ENV = "TRAJORACLE_VERDICT_URL"
TOKEN_ENV = "TRAJORACLE_VERDICT_TOKEN"


@dataclass(frozen=True)
class OracleConfig:
    k: int = 5
    age_gap: float = 15.0
    neighbor_weight: float = 0.60
    p_success: float = 0.20
    p_failure: float = 0.80
    threshold: float = 0.50

    def validate(self):
        if not isinstance(self.k, int) or self.k < 1:
            raise ConfigError("k: must be an integer >= 1")
        if not (self.age_gap >= 0):
            raise ConfigError("age_gap: must be >= 0 (inf disables the filter)")
        if not 0.0 <= self.neighbor_weight <= 1.0:
            raise ConfigError("neighbor_weight: must be in [0, 1]")
        if not 0.0 < self.p_success < self.p_failure < 1.0:
            raise ConfigError("p_success/p_failure: need 0 < p_success < p_failure < 1")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold: must be in [0, 1]")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(d["age_gap"]):
            d["age_gap"] = "inf"
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "OracleConfig":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown oracle config keys: {sorted(unknown)}")
        if "age_gap" in data:
            data["age_gap"] = float(data["age_gap"])
        return cls(**data).validate()


def _fmt_age(age: float) -> str:
    return f"{age:.1f}"


def _fmt_gap(gap: float) -> str:
    return "inf" if math.isinf(gap) else f"{gap:g}"


@dataclass(frozen=True)
class NeighborSummary:
    rank: int  # 1-based position in retrieval order
    age: float
    sex: str
    label: int

    @property
    def outcome(self) -> str:
        return OUTCOME_WORDS[self.label]

    def citation(self) -> str:
        return f"#{self.rank} (age {_fmt_age(self.age)}, {self.sex}, {self.outcome})"


@dataclass(frozen=True)
class EvidencePrompt:
    query_age: float
    query_sex: str
    neighbors: tuple[NeighborSummary, ...]
    age_gap: float
    instruction: str
    text: str

    def eligible(self) -> list[NeighborSummary]:
        return [n for n in self.neighbors if abs(n.age - self.query_age) <= self.age_gap]


def neighbor_vote(result: RetrievalResult) -> float:
    """Fraction of retrieved neighbours with y = 1, over the number actually returned."""
    if not result.neighbors:
        raise ValueError("neighbor vote needs at least one neighbour")
    return sum(n.label for n in result.neighbors) / len(result.neighbors)


def build_prompt(query_age: float, query_sex: str, result: RetrievalResult,
                 config: OracleConfig) -> EvidencePrompt:
    neighbors = tuple(NeighborSummary(i + 1, n.age, n.sex, n.label)
                      for i, n in enumerate(result.neighbors))
    gap = _fmt_gap(config.age_gap)
    if math.isinf(config.age_gap):
        directive = f"Age filter disabled (maximum age gap: {gap}); consider every match."
    else:
        directive = (f"Mentally filter out any historical match whose age differs from the "
                     f"query patient's by more than {gap} years.")
    instruction = (directive + " Begin your response with exactly one of SUCCESS or FAILURE, "
                   "then one sentence of justification citing matches by # number.")
    lines = [f"Query patient: age {_fmt_age(query_age)}, sex {query_sex}.",
             f"Retrieved historical matches ({len(neighbors)}, most similar first):"]
    lines += [n.citation() for n in neighbors]
    lines.append(instruction)
    return EvidencePrompt(float(query_age), query_sex, neighbors, float(config.age_gap),
                          instruction, "\n".join(lines))


# ---------------------------------------------------------------- providers

class VerdictProvider(Protocol):
    thread_safe: bool

    def __call__(self, prompt: EvidencePrompt) -> str: ...


FALLBACK_NOTE = "no age-eligible match"


def rule_based_verdict(prompt: EvidencePrompt) -> str:
    """Majority of the age-filtered matches; ties and unfavourable majorities give FAILURE."""
    pool = prompt.eligible()
    fallback = not pool
    if fallback:
        pool = list(prompt.neighbors)
    n_bad = sum(n.label for n in pool)
    n_good = len(pool) - n_bad
    token = FAILURE if n_bad >= n_good else SUCCESS
    support = [n for n in pool if n.label == (1 if token == FAILURE else 0)]
    outcome = OUTCOME_WORDS[1 if token == FAILURE else 0]
    cites = ", ".join(n.citation() for n in support)
    if fallback:
        lead = (f"{FALLBACK_NOTE} within {_fmt_gap(prompt.age_gap)} years, so all "
                f"{len(pool)} matches were used; ")
    else:
        lead = ""
    return f"{token}: {lead}{len(support)} of {len(pool)} matches were {outcome}: {cites}."


class RuleBasedProvider:
    thread_safe = True

    def __call__(self, prompt: EvidencePrompt) -> str:
        return rule_based_verdict(prompt)


@dataclass
class EndpointConfig:
    url: str
    token: str | None = None
    timeout: float = 30.0
    max_in_flight: int = 4
    max_new_tokens: int = 64

    @classmethod
    def from_env(cls) -> "EndpointConfig | None":
        url = os.environ.get(URL_ENV)
        if not url:
            return None
        return cls(url=url, token=os.environ.get(TOKEN_ENV))


def external_verdict(prompt: EvidencePrompt, endpoint: EndpointConfig) -> str:
    body = json.dumps({
        "system": SYSTEM_TEXT,
        "prompt": prompt.text,
        "max_new_tokens": endpoint.max_new_tokens,
        "do_sample": False,
        "temperature": 0.0,
    }).encode()
    headers = {"Content-Type": "application/json"}
    if endpoint.token:
        headers["Authorization"] = f"Bearer {endpoint.token}"
    req = urllib.request.Request(endpoint.url, data=body, headers=headers, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=endpoint.timeout) as resp:
            raw = resp.read().decode("utf-8", errors="replace")
            ctype = resp.headers.get("Content-Type", "")
    except (urllib.error.URLError, OSError, ValueError) as exc:
        raise ProviderError(f"verdict endpoint failed: {exc}") from exc
    if "json" in ctype:
        try:
            payload = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ProviderError(f"verdict endpoint sent invalid JSON: {exc}") from exc
        if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
            raise ProviderError("verdict endpoint JSON lacks a 'text' string")
        return payload["text"]
    return raw


class HTTPProvider:
    """POSTs prompts to an endpoint; a semaphore caps concurrent requests."""

    thread_safe = True

    def __init__(self, endpoint: EndpointConfig):
        if endpoint.max_in_flight < 1:
            raise ConfigError("max_in_flight: must be >= 1")
        self.endpoint = endpoint
        self._slots = threading.BoundedSemaphore(endpoint.max_in_flight)

    def __call__(self, prompt: EvidencePrompt) -> str:
        with self._slots:
            return external_verdict(prompt, self.endpoint)


# ---------------------------------------------------------------- parsing and fusion

_FIRST_WORD = re.compile(r"[A-Za-z]+")
_LEAD_PUNCT = re.compile(r"^[\s:;,.\-–—]+")


def parse_verdict(response: str) -> tuple[str, str]:
    m = _FIRST_WORD.search(response or "")
    if m is None:
        return UNPARSEABLE, (response or "").strip()
    word = m.group(0).upper()
    if word not in (SUCCESS, FAILURE):
        return UNPARSEABLE, response.strip()
    rest = _LEAD_PUNCT.sub("", response[m.end():]).strip()
    return word, rest


def llm_probability(token: str, config: OracleConfig) -> float:
    return config.p_success if token == SUCCESS else config.p_failure


def fuse(p_neighbor: float, p_llm: float, config: OracleConfig) -> tuple[float, int]:
    w = config.neighbor_weight
    p_q = w * p_neighbor + (1.0 - w) * p_llm
    return p_q, int(p_q > config.threshold)


@dataclass(frozen=True)
class OracleVerdict:
    token: str
    justification: str
    p_neighbor: float
    p_llm: float
    p_q: float
    label: int
    query_id: str = ""
    neighbor_ids: tuple[str, ...] = ()
    similarities: tuple[float, ...] = ()
    response: str = ""
    prompt: str = ""
    provider_error: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["neighbor_ids"] = list(self.neighbor_ids)
        d["similarities"] = list(self.similarities)
        return d


def predict_from_result(query_id: str, query_age: float, query_sex: str,
                        result: RetrievalResult, provider, config: OracleConfig,
                        prompt: EvidencePrompt | None = None) -> OracleVerdict:
    p_nb = neighbor_vote(result)
    if prompt is None:
        prompt = build_prompt(query_age, query_sex, result, config)
    error = None
    try:
        response = provider(prompt)
    except ProviderError as exc:
        response, error = "", str(exc)
    token, justification = parse_verdict(response)
    p_llm = llm_probability(token, config)
    p_q, label = fuse(p_nb, p_llm, config)
    return OracleVerdict(token, justification, p_nb, p_llm, p_q, label, query_id,
                         tuple(n.subject_id for n in result.neighbors),
                         tuple(n.similarity for n in result.neighbors),
                         response, prompt.text, error)


def predict(query_id: str, query_age: float, query_sex: str, query_vector,
            archive: PopulationArchive, provider, config: OracleConfig) -> OracleVerdict:
    result = search(archive, query_vector, config.k)
    return predict_from_result(query_id, query_age, query_sex, result, provider, config)


# ---------------------------------------------------------------- audit

_CITE = re.compile(r"#(\d+)(?:\s*\(age\s+(\d+(?:\.\d+)?),\s*([A-Za-z]+),\s*([A-Za-z]+)\))?")
_AGE = re.compile(r"\bage[sd]?\s+(\d+(?:\.\d+)?)", re.IGNORECASE)


@dataclass(frozen=True)
class AuditFlags:
    hallucination: bool
    adherent: bool
    cited: tuple[int, ...]


def audit_justification(verdict_or_response, prompt: EvidencePrompt) -> AuditFlags:
    """Flags facts absent from the prompt, and out-of-gap matches cited as support.

    Citations are "#i", optionally with "(age A, S, outcome)"; free-standing
    "age X" mentions must match an age shown in the prompt.
    """
    text = (verdict_or_response.response if isinstance(verdict_or_response, OracleVerdict)
            else str(verdict_or_response))
    by_rank = {n.rank: n for n in prompt.neighbors}
    known_ages = {_fmt_age(prompt.query_age)} | {_fmt_age(n.age) for n in prompt.neighbors}
    hallucinated = False
    cited = []
    for m in _CITE.finditer(text):
        rank = int(m.group(1))
        n = by_rank.get(rank)
        if n is None:
            hallucinated = True
            continue
        cited.append(rank)
        if m.group(2) is not None:
            if (m.group(2) != _fmt_age(n.age) or m.group(3) != n.sex
                    or m.group(4).lower() != n.outcome):
                hallucinated = True
    for m in _AGE.finditer(text):
        value = m.group(1)
        if value not in known_ages and _fmt_age(float(value)) not in known_ages:
            hallucinated = True
    eligible = {n.rank for n in prompt.eligible()}
    violating = [r for r in cited if r not in eligible]
    # citing out-of-gap matches is adherent only when none were eligible and the reply says so
    if violating and not eligible and FALLBACK_NOTE in text.lower():
        violating = []
    return AuditFlags(hallucinated, not violating, tuple(cited))


# ---------------------------------------------------------------- log

def write_verdict_log(path, verdicts: Sequence[OracleVerdict]) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for v in verdicts:
            fh.write(json.dumps(v.to_dict(), sort_keys=True) + "\n")


def read_verdict_log(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out
