from __future__ import annotations

import json
import random

import numpy as np
import pytest

from odesearch import expr as ex
from odesearch.proposer import (
    ChatProposer,
    PromptContext,
    ProposerConfig,
    RandomProposer,
    ScriptedProposer,
    TransportError,
    build_prompt,
    load_script,
    make_proposer,
    parse_response,
)
from .stub_llm import StubLLMServer
from .test_expr import random_tree

REFERENCE_EXAMPLES = (
    "x_1**C",
    "C*x_0 + x_1",
    "C*sin(x_2)",
    "C*log(exp(x_2) + Abs(x_1))",
    "C*x_0 + C*sin(x_2)",
    "C*x_0*x_1",
    "(C + Abs(x_2))**C*(C*x_0**C + C*exp(x_1))",
    "C*log(x_0 + Abs(x_1)) + C*sin(x_2)",
)

REFERENCE_SYSTEM_MESSAGE = (
    "You are a scientist whose task is to perform Symbolic Regression. "
    "You should search the function space to find the best simple function that fits the data. "
    "You are given 8 examples of proposed equations sorted from worst to best. "
    "Your goal is to suggest 3 improved equations of varying complexity. "
    'Replace all numerical constants with "C" -- they will be optimized with an external optimizer. '
    "Write one equation per line from simplest to most complex with no extra explanation. "
    "Available operators: +, -, *, **, /, sin, log, exp, abs. "
    "Independent variables: x_0, x_1, x_2."
)

REFERENCE_RESPONSE = (
    "C*x_0 + C*log(Abs(x_1) + 1)\n"
    "C*(x_0 + sin(x_2)) * exp(x_1)\n"
    "C*(x_0**2 + x_1**2) / (1 + abs(x_2))"
)


def reference_context() -> PromptContext:
    return PromptContext(dim=3, k=8, b=3, examples=REFERENCE_EXAMPLES)


# ----------------------------------------------------------- build_prompt ---

def test_build_prompt_reproduces_reference_payload():
    messages = build_prompt(reference_context())
    assert [m["role"] for m in messages] == ["system", "user"]
    assert messages[0]["content"] == REFERENCE_SYSTEM_MESSAGE
    assert messages[1]["content"] == "\n".join(REFERENCE_EXAMPLES)


def test_build_prompt_single_example():
    messages = build_prompt(PromptContext(dim=1, k=1, b=3, examples=("x_0",)))
    assert messages[1]["content"] == "x_0"
    assert "You are given 1 examples" in messages[0]["content"]
    assert "Independent variables: x_0." in messages[0]["content"]


def test_build_prompt_deterministic():
    assert build_prompt(reference_context()) == build_prompt(reference_context())


def test_build_prompt_never_leaks_system_metadata(registry):
    payload = json.dumps(build_prompt(reference_context()))
    for system in registry:
        assert system.name not in payload


def test_prompt_context_validates_example_count():
    with pytest.raises(ValueError):
        PromptContext(dim=1, k=3, b=3, examples=("x_0",))


# --------------------------------------------------------- parse_response ---

def test_parse_response_reference_output():
    out = parse_response(REFERENCE_RESPONSE, 3, 3)
    assert len(out) == 3
    assert out[0] == ex.parse("C*x_0 + C*log(Abs(x_1) + 1)", 3)


def test_parse_response_empty():
    assert parse_response("", 3, 3) == []


def test_parse_response_salvages_valid_lines():
    out = parse_response("garbage(((\nC*x_0", 1, 3)
    assert [ex.to_masked_string(e) for e in out] == ["C*x_0"]


def test_parse_response_strips_wrappers():
    text = "```\n1. C*x_0\n- C*sin(x_1)\n\"C*x_0 + C\"\n```"
    out = parse_response(text, 2, 5)
    assert [ex.to_masked_string(e) for e in out] == ["C*x_0", "C*sin(x_1)", "C*x_0 + C"]


def test_parse_response_caps_at_b():
    text = "x_0\nC*x_0\nC + x_0\nC*x_0 + C"
    assert len(parse_response(text, 1, 2)) == 2


def test_parse_response_lossless_for_printed_batches():
    rng = random.Random(23)
    for _ in range(50):
        batch = [random_tree(rng, 3) for _ in range(4)]
        text = "\n".join(ex.to_masked_string(e) for e in batch)
        out = parse_response(text, 3, len(batch))
        assert [ex.to_masked_string(e) for e in out] == [ex.to_masked_string(e) for e in batch]


# --------------------------------------------------------------- scripted ---

def test_scripted_echo():
    proposer = ScriptedProposer([("C*x_0",)])
    ctx = PromptContext(dim=1, k=1, b=3, examples=("x_0",))
    out = proposer.propose(ctx)
    assert [ex.to_masked_string(e) for e in out] == ["C*x_0"]


def test_scripted_cursor_and_tail_repeat():
    proposer = ScriptedProposer([("x_0",), ("C*x_0",)])
    ctx = PromptContext(dim=1, k=1, b=3, examples=("x_0",))
    masked = [[ex.to_masked_string(e) for e in proposer.propose(ctx)] for _ in range(4)]
    assert masked == [["x_0"], ["C*x_0"], ["C*x_0"], ["C*x_0"]]


def test_scripted_drops_out_of_grammar_lines():
    proposer = ScriptedProposer([("cos(x_0)", "C*x_0")])
    ctx = PromptContext(dim=1, k=1, b=3, examples=("x_0",))
    out = proposer.propose(ctx)
    assert [ex.to_masked_string(e) for e in out] == ["C*x_0"]


def test_load_script(tmp_path):
    path = tmp_path / "script.json"
    path.write_text(json.dumps([["C*x_0"], ["x_0 + C"]]))
    assert load_script(path) == (("C*x_0",), ("x_0 + C",))


# ----------------------------------------------------------------- random ---

def _random_ctx() -> PromptContext:
    return PromptContext(dim=2, k=4, b=3,
                         examples=("x_0", "C*x_1", "C*x_0 + C", "C*sin(x_0)"))


def test_random_proposer_contract():
    proposer = RandomProposer()
    out = proposer.propose(_random_ctx(), np.random.default_rng(9))
    assert len(out) == 3
    for e in out:
        assert ex.contains_variable(e)
        for node in ex.iter_nodes(e):
            if isinstance(node, ex.Unary):
                assert node.op in ex.DISCOVERY_UNARY
            assert not isinstance(node, ex.Literal)
        # slots renumbered canonically
        slots = sorted(n.slot for n in ex.iter_nodes(e) if isinstance(n, ex.Const))
        assert slots == list(range(len(slots)))


def test_random_proposer_reproducible():
    proposer = RandomProposer()
    a = [ex.to_masked_string(e) for e in proposer.propose(_random_ctx(), np.random.default_rng(77))]
    b = [ex.to_masked_string(e) for e in proposer.propose(_random_ctx(), np.random.default_rng(77))]
    assert a == b


def test_random_proposer_survives_unparseable_examples():
    ctx = PromptContext(dim=1, k=2, b=2, examples=("]]junk", "more junk(("))
    out = RandomProposer().propose(ctx, np.random.default_rng(1))
    assert len(out) == 2
    assert all(ex.contains_variable(e) for e in out)


# ------------------------------------------------------------------- chat ---

def test_chat_proposer_round_trip():
    with StubLLMServer(REFERENCE_RESPONSE) as stub:
        cfg = ProposerConfig(kind="chat", endpoint=stub.endpoint, model="stub-model",
                             temperature=0.4)
        out = ChatProposer(cfg).propose(reference_context())
        assert len(out) == 3
        request = stub.requests[0]["body"]
        assert request["model"] == "stub-model"
        assert request["temperature"] == 0.4
        assert request["messages"] == build_prompt(reference_context())


def test_chat_proposer_retries_then_succeeds():
    with StubLLMServer("C*x_0", fail_first=2) as stub:
        cfg = ProposerConfig(kind="chat", endpoint=stub.endpoint, model="m", max_retries=3)
        out = ChatProposer(cfg).propose(PromptContext(dim=1, k=1, b=1, examples=("x_0",)))
        assert [ex.to_masked_string(e) for e in out] == ["C*x_0"]
        assert len(stub.requests) == 3


def test_chat_proposer_transport_error_after_retries():
    with StubLLMServer("C*x_0", fail_first=99) as stub:
        cfg = ProposerConfig(kind="chat", endpoint=stub.endpoint, model="m", max_retries=2)
        with pytest.raises(TransportError):
            ChatProposer(cfg).propose(PromptContext(dim=1, k=1, b=1, examples=("x_0",)))
        assert len(stub.requests) == 2


def test_chat_proposer_mirrors_requests(tmp_path):
    log = tmp_path / "chat.jsonl"
    with StubLLMServer("C*x_0") as stub:
        cfg = ProposerConfig(kind="chat", endpoint=stub.endpoint, model="m",
                             log_path=str(log))
        ChatProposer(cfg).propose(PromptContext(dim=1, k=1, b=1, examples=("x_0",)))
    entries = [json.loads(line) for line in log.read_text().splitlines()]
    assert len(entries) == 1
    assert entries[0]["response"] == "C*x_0"
    assert entries[0]["request"]["messages"][1]["content"] == "x_0"


def test_chat_proposer_requires_endpoint(monkeypatch):
    monkeypatch.delenv("ODESEARCH_ENDPOINT", raising=False)
    monkeypatch.delenv("ODESEARCH_MODEL", raising=False)
    with pytest.raises(ValueError):
        ChatProposer(ProposerConfig(kind="chat"))


def test_make_proposer_dispatch():
    assert isinstance(make_proposer(ProposerConfig(kind="random")), RandomProposer)
    assert isinstance(
        make_proposer(ProposerConfig(kind="scripted", script=(("x_0",),))), ScriptedProposer
    )
    with pytest.raises(ValueError):
        make_proposer(ProposerConfig(kind="scripted"))
    with pytest.raises(ValueError):
        make_proposer(ProposerConfig(kind="mystery"))
