"""Pluggable equation proposers: prompt construction, response parsing, and
the three proposal backends.

``chat`` talks to any OpenAI-style chat-completions endpoint; ``scripted`` is
a deterministic test double that replays pre-programmed batches; ``random``
applies uninformed subtree mutation/crossover to the in-context examples and
doubles as the classical-GP control arm.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import httpx
import numpy as np

from . import expr as ex

logger = logging.getLogger(__name__)

DEFAULT_OPERATORS = ("+", "-", "*", "**", "/", "sin", "log", "exp", "abs")

SYSTEM_TEMPLATE = (
    "You are a scientist whose task is to perform Symbolic Regression. "
    "You should search the function space to find the best simple function that fits the data. "
    "You are given {k} examples of proposed equations sorted from worst to best. "
    "Your goal is to suggest {b} improved equations of varying complexity. "
    'Replace all numerical constants with "C" -- they will be optimized with an external optimizer. '
    "Write one equation per line from simplest to most complex with no extra explanation. "
    "Available operators: {operators}. "
    "Independent variables: {variables}."
)

ENDPOINT_ENV = "ODESEARCH_ENDPOINT"
MODEL_ENV = "ODESEARCH_MODEL"
API_KEY_ENV = "ODESEARCH_API_KEY"


class TransportError(Exception):
    """Chat endpoint unreachable or persistently misbehaving."""


@dataclass(frozen=True)
class PromptContext:
    """Everything needed to ask for new equations: the variable count, the
    in-context examples (masked, sorted worst to best), and the request size.
    No system metadata (names, units, variable semantics) ever enters here."""

    dim: int
    k: int
    b: int
    examples: tuple[str, ...]
    operators: tuple[str, ...] = DEFAULT_OPERATORS

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if len(self.examples) != self.k:
            raise ValueError(f"expected {self.k} examples, got {len(self.examples)}")


@dataclass(frozen=True)
class ProposerConfig:
    kind: str = "random"  # chat | scripted | random
    endpoint: str | None = None
    model: str | None = None
    api_key: str | None = None
    temperature: float = 0.7
    timeout: float = 60.0
    max_retries: int = 3
    script: tuple[tuple[str, ...], ...] | None = None
    log_path: str | None = None


def build_prompt(ctx: PromptContext) -> list[dict[str, str]]:
    """Render the two-message chat payload.  Byte-deterministic in the
    context: the system message is the fixed instruction template with k, b,
    the operator alphabet, and the variable list substituted; the user message
    is the masked examples joined by newlines, worst first."""
    system = SYSTEM_TEMPLATE.format(
        k=ctx.k,
        b=ctx.b,
        operators=", ".join(ctx.operators),
        variables=", ".join(f"x_{i}" for i in range(ctx.dim)),
    )
    user = "\n".join(ctx.examples)
    return [
        {"role": "system", "content": system},
        {"role": "user", "content": user},
    ]


_LIST_MARKER = re.compile(r"^(?:\d+\s*[\.\):]\s*|[-*•]\s+)")
_FENCE = re.compile(r"^```")


def _candidate_lines(raw: str):
    # cleaned variants first (the expected shape), raw text as a fallback
    line = raw.strip()
    if not line or _FENCE.match(line):
        return
    dequoted = line.strip("\"'`").strip()
    unmarked = _LIST_MARKER.sub("", dequoted).strip()
    seen = []
    for candidate in (unmarked, dequoted, line):
        if candidate and candidate not in seen:
            seen.append(candidate)
            yield candidate


def parse_response(text: str, dim: int, b: int) -> list[ex.Expr]:
    """Salvage up to ``b`` discovery-grammar expressions from untrusted text.

    One equation per line is expected; list markers, surrounding quotes, code
    fences, and blank lines are tolerated.  Lines that still fail to parse are
    dropped (and logged), never fatal.
    """
    out: list[ex.Expr] = []
    for raw in text.splitlines():
        if len(out) >= b:
            break
        parsed = None
        for candidate in _candidate_lines(raw):
            try:
                parsed = ex.parse(candidate, dim, ex.DISCOVERY)
                break
            except ex.ExprError:
                continue
        if parsed is not None:
            out.append(parsed)
        elif raw.strip() and not _FENCE.match(raw.strip()):
            logger.debug("dropping unparseable proposal line: %r", raw)
    return out


class ChatProposer:
    """Client for the chat-completions wire protocol with retry/backoff.

    Endpoint, model, and API key fall back to the ODESEARCH_ENDPOINT,
    ODESEARCH_MODEL, and ODESEARCH_API_KEY environment variables.  Requests
    and responses can be mirrored to a line-delimited JSON log for audit.
    """

    def __init__(self, cfg: ProposerConfig):
        self.cfg = cfg
        self.endpoint = (cfg.endpoint or os.environ.get(ENDPOINT_ENV, "")).rstrip("/")
        self.model = cfg.model or os.environ.get(MODEL_ENV)
        self.api_key = cfg.api_key or os.environ.get(API_KEY_ENV)
        if not self.endpoint or not self.model:
            raise ValueError("chat proposer requires an endpoint and a model")
        self._log_lock = threading.Lock()

    def _mirror(self, entry: dict) -> None:
        if not self.cfg.log_path:
            return
        with self._log_lock:
            with open(self.cfg.log_path, "a") as handle:
                handle.write(json.dumps(entry) + "\n")

    def _post(self, payload: dict) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = f"{self.endpoint}/chat/completions"
        last_error: Exception | None = None
        for attempt in range(max(1, self.cfg.max_retries)):
            if attempt:
                time.sleep(min(0.5 * 2 ** (attempt - 1), 8.0))
            try:
                response = httpx.post(url, json=payload, headers=headers,
                                      timeout=self.cfg.timeout)
                response.raise_for_status()
                body = response.json()
                return body["choices"][0]["message"]["content"]
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as err:
                last_error = err
                logger.warning("chat request failed (attempt %d): %s", attempt + 1, err)
        raise TransportError(f"chat endpoint failed after {self.cfg.max_retries} attempts: {last_error}")

    def propose(self, ctx: PromptContext, rng=None) -> list[ex.Expr]:
        messages = build_prompt(ctx)
        payload = {
            "model": self.model,
            "messages": messages,
            "temperature": self.cfg.temperature,
        }
        try:
            content = self._post(payload)
        except TransportError:
            self._mirror({"request": payload, "error": "transport failure"})
            raise
        self._mirror({"request": payload, "response": content})
        return parse_response(content, ctx.dim, ctx.b)


class ScriptedProposer:
    """Deterministic test double: replays pre-programmed batches of equation
    lines in order, then keeps returning the final batch.  Access to the
    cursor is serialized so concurrent islands consume batches one at a time."""

    def __init__(self, batches: Sequence[Sequence[str]]):
        self.batches = [tuple(batch) for batch in batches]
        self._cursor = 0
        self._lock = threading.Lock()

    def propose(self, ctx: PromptContext, rng=None) -> list[ex.Expr]:
        if not self.batches:
            return []
        with self._lock:
            batch = self.batches[min(self._cursor, len(self.batches) - 1)]
            self._cursor += 1
        out = []
        for line in batch:
            try:
                out.append(ex.parse(line, ctx.dim, ex.DISCOVERY))
            except ex.ExprError:
                logger.debug("scripted batch line not in discovery grammar: %r", line)
        return out


class RandomProposer:
    """Uninformed variation operator: subtree mutation of an in-context
    example (weighted toward the better ones), or with probability 0.3 a
    subtree swap between two examples."""

    CROSSOVER_PROB = 0.3
    MAX_DEPTH = 2

    def propose(self, ctx: PromptContext, rng: np.random.Generator) -> list[ex.Expr]:
        parents: list[ex.Expr] = []
        for text in ctx.examples:
            try:
                parents.append(ex.parse(text, ctx.dim, ex.DISCOVERY))
            except ex.ExprError:
                continue
        out: list[ex.Expr] = []
        for _ in range(ctx.b):
            child = self._offspring(parents, ctx.dim, rng)
            if child is None or not ex.contains_variable(child):
                child = ex.random_seed_expr(rng, ctx.dim)
            out.append(ex.canonicalize_slots(child))
        return out

    def _pick_parent(self, parents: list[ex.Expr], rng) -> ex.Expr:
        # examples arrive worst-first, so weight by position
        weights = np.arange(1, len(parents) + 1, dtype=float)
        weights /= weights.sum()
        return parents[int(rng.choice(len(parents), p=weights))]

    def _offspring(self, parents: list[ex.Expr], dim: int, rng) -> ex.Expr | None:
        if not parents:
            return None
        recipient = self._pick_parent(parents, rng)
        target = int(rng.integers(ex.complexity(recipient)))
        if rng.random() < self.CROSSOVER_PROB and len(parents) >= 2:
            donor = self._pick_parent(parents, rng)
            graft = ex.subtree_at(donor, int(rng.integers(ex.complexity(donor))))
        else:
            graft = self._random_tree(rng, dim, self.MAX_DEPTH)
        return ex.replace_at(recipient, target, graft)

    def _random_tree(self, rng, dim: int, depth: int) -> ex.Expr:
        roll = rng.random()
        if depth == 0 or roll < 0.3:
            if rng.random() < 0.4:
                return ex.Const(0)
            return ex.Variable(int(rng.integers(dim)))
        if roll < 0.6:
            op = ex.DISCOVERY_UNARY[int(rng.integers(len(ex.DISCOVERY_UNARY)))]
            return ex.Unary(op, self._random_tree(rng, dim, depth - 1))
        op = ex.BINARY_OPS[int(rng.integers(len(ex.BINARY_OPS)))]
        return ex.Binary(op, self._random_tree(rng, dim, depth - 1),
                         self._random_tree(rng, dim, depth - 1))


def load_script(path: str | Path) -> tuple[tuple[str, ...], ...]:
    """Read a scripted-proposer program: a JSON array of batches, each batch
    an array of equation strings."""
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data.get("batches", [])
    return tuple(tuple(str(line) for line in batch) for batch in data)


def make_proposer(cfg: ProposerConfig):
    if cfg.kind == "chat":
        return ChatProposer(cfg)
    if cfg.kind == "scripted":
        if cfg.script is None:
            raise ValueError("scripted proposer requires a script")
        return ScriptedProposer(cfg.script)
    if cfg.kind == "random":
        return RandomProposer()
    raise ValueError(f"unknown proposer kind {cfg.kind!r}")
