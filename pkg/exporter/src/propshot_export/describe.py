"""Description generation against a chat-completions endpoint, with replay.

The instruction asks for short, appearance-focused attribute phrases in a
fixed line-per-phrase format and forbids the class name; any phrase that
still contains it is rewritten with the name stripped and flagged in the
log. Raw endpoint responses are cached to a JSON file so later runs (and
all tests) replay without network access.
"""

from __future__ import annotations

import logging
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .errors import EndpointError, ParseError
from .formats import read_json, write_descriptions_jsonl, write_json

log = logging.getLogger("propshot_export")

DEFAULT_INSTRUCTION = (
    "You are labeling visual attributes for machine-learning use on "
    "{dataset type} images. List {count} short phrases, one per line, each "
    "describing one distinctive visible attribute of a {category name} "
    "(color, shape, texture, or a part). Keep every phrase under eight "
    "words, use no numbering, and never use the word \"{category name}\"."
)

_LINE_PREFIX_RE = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


@dataclass
class DescribeJob:
    class_names: list[str]
    dataset_type: str
    out_path: Path
    per_class: int = 8
    instruction: str = DEFAULT_INSTRUCTION
    endpoint_url: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-3.5-turbo"
    api_key_env: str = "OPENAI_API_KEY"
    cache_path: Path | None = None
    from_cache: Path | None = None
    timeout: float = 60.0


def _strip_class_name(phrase: str, class_name: str) -> tuple[str, bool]:
    display = class_name.replace("_", " ")
    pattern = re.compile(r"\b" + re.escape(display) + r"\b", re.IGNORECASE)
    if not pattern.search(phrase):
        return phrase, False
    stripped = pattern.sub("", phrase)
    stripped = re.sub(r"\s{2,}", " ", stripped).strip(" ,.;:-")
    return stripped, True


def parse_response(raw: str, class_name: str, limit: int) -> list[str]:
    """Response text -> cleaned, name-free phrases (at least one)."""
    phrases = []
    for line in raw.splitlines():
        phrase = _LINE_PREFIX_RE.sub("", line).strip().strip('"').strip()
        if not phrase:
            continue
        phrase, flagged = _strip_class_name(phrase, class_name)
        if flagged:
            log.warning("class %s: stripped class name from %r", class_name, phrase)
            print(f"warning: class {class_name}: stripped class name -> {phrase!r}",
                  file=sys.stderr)
        if phrase:
            phrases.append(phrase)
        if len(phrases) >= limit:
            break
    if not phrases:
        raise ParseError(f"class {class_name}: no usable phrases in response "
                         f"{raw[:120]!r}")
    return phrases


def _query_endpoint(job: DescribeJob, prompt: str) -> str:
    key = os.environ.get(job.api_key_env, "")
    headers = {"Content-Type": "application/json"}
    if key:
        headers["Authorization"] = f"Bearer {key}"
    try:
        resp = requests.post(
            job.endpoint_url,
            json={"model": job.model,
                  "messages": [{"role": "user", "content": prompt}]},
            headers=headers, timeout=job.timeout)
        resp.raise_for_status()
        return resp.json()["choices"][0]["message"]["content"]
    except (requests.RequestException, KeyError, ValueError) as exc:
        raise EndpointError(f"{job.endpoint_url}: {exc}") from exc


def generate_descriptions(job: DescribeJob) -> Path:
    """Write descriptions.jsonl for every class; returns its path.

    With `from_cache`, responses replay from the stored file and no network
    is touched. Live responses are written to `cache_path` (default: next
    to the output) before parsing.
    """
    out_path = Path(job.out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if not job.class_names:
        write_descriptions_jsonl(out_path, [])
        return out_path

    if job.from_cache is not None:
        responses = read_json(job.from_cache).get("responses", {})
    else:
        responses = {}
        for name in job.class_names:
            prompt = (job.instruction
                      .replace("{category name}", name.replace("_", " "))
                      .replace("{dataset type}", job.dataset_type)
                      .replace("{count}", str(job.per_class)))
            responses[name] = _query_endpoint(job, prompt)
        cache_path = Path(job.cache_path) if job.cache_path else \
            out_path.with_name("llm_cache.json")
        write_json(cache_path, {
            "model": job.model,
            "dataset_type": job.dataset_type,
            "responses": dict(sorted(responses.items())),
        })

    entries = []
    for class_id, name in enumerate(job.class_names):
        if name not in responses:
            raise ParseError(f"cache has no response for class {name!r}")
        entries.append({
            "class_id": class_id,
            "class_name": name,
            "descriptions": parse_response(responses[name], name, job.per_class),
        })
    write_descriptions_jsonl(out_path, entries)
    return out_path
