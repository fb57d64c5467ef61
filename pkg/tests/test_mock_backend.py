from collections import Counter

import pytest

from sftrecon.backends import (
    ERR_EXHAUSTED_RETRIES,
    FINISH_ERROR,
    FINISH_LENGTH,
    SamplingParams,
    make_backend,
)
from sftrecon.chat_templates import extract_instruction, get_template
from sftrecon.judging import RETRY_NUDGE, build_rubric_prompt, parse_score
from sftrecon.mock import (
    MOCK_CATEGORY_WEIGHTS,
    MockBackend,
    canonical_prompt,
    committee_specs,
    draw_instructions,
    infer_role,
    instruction_category,
    judge_score_for,
    mock_generate,
    mock_spec,
    paragraph_count,
    parse_mock_address,
)
from sftrecon.report import build_classify_prompt

ELICIT = SamplingParams(temperature=1.0, top_p=0.99, max_new_tokens=256)
PLAIN = SamplingParams()


def test_address_parsing():
    assert parse_mock_address("mock:7") == (7, {})
    assert parse_mock_address("mock") == (0, {})
    assert parse_mock_address("mock:3?fail=always&judge=unparsable-first") == (
        3,
        {"fail": "always", "judge": "unparsable-first"},
    )
    with pytest.raises(Exception):
        parse_mock_address("http://example.test")
    with pytest.raises(Exception):
        parse_mock_address("mock:not-a-number")


def test_generation_is_pure():
    spec = mock_spec("m", 42)
    with make_backend(spec) as backend:
        first = backend.generate([{"role": "user", "content": "Explain tides."}], PLAIN)
        second = backend.generate([{"role": "user", "content": "Explain tides."}], PLAIN)
    with make_backend(mock_spec("other-id", 42)) as backend:
        third = backend.generate([{"role": "user", "content": "Explain tides."}], PLAIN)
    assert first.text == second.text == third.text
    assert first.ok


def test_different_seeds_and_param_seeds_vary_output():
    prompt = [{"role": "user", "content": "Explain tides."}]
    a = mock_generate(1, prompt, PLAIN)
    b = mock_generate(2, prompt, PLAIN)
    c = mock_generate(1, prompt, SamplingParams(seed=5))
    assert a != b
    assert a != c


def test_role_inference():
    template = get_template("llama-3")
    assert infer_role(template.pre_query_text) == "instruction-source"
    assert infer_role("prefix text " + template.pre_query_text) == "instruction-source"
    assert infer_role(build_rubric_prompt("do x", "done")) == "judge"
    assert infer_role(build_classify_prompt("do x")) == "classifier"
    assert infer_role([{"role": "user", "content": "do x"}]) == "responder"
    assert infer_role("just some text") == "responder"


def test_instruction_source_continuation_cleans_up():
    template = get_template("llama-3")
    spec = mock_spec("m", 9, template_family="llama-3")
    with make_backend(spec) as backend:
        seen = set()
        for i in range(30):
            result = backend.generate(
                template.pre_query_text, SamplingParams(seed=i, max_new_tokens=4096)
            )
            assert template.turn_end_markers[0] in result.text
            text = extract_instruction(template, result.text)
            assert template.turn_end_markers[0] not in text
            seen.add(text)
    assert len(seen) > 15  # distinct draws across param seeds


def test_responder_paragraph_levels():
    counts = set()
    for i in range(40):
        text = mock_generate(3, [{"role": "user", "content": f"Question {i}?"}], PLAIN)
        count = paragraph_count(text)
        assert 1 <= count <= 5
        counts.add(count)
    assert len(counts) >= 3  # levels actually vary


def test_judge_reply_parses_and_matches_oracle():
    response = "First paragraph.\n\nSecond paragraph.\n\nThird paragraph."
    prompt = build_rubric_prompt("Write three things.", response)
    for seed in (1, 2, 3, 4):
        reply = mock_generate(seed, prompt, PLAIN)
        last_line = reply.splitlines()[-1]
        assert last_line.startswith("Score: ")
        parsed = parse_score(reply)
        assert parsed is not None
        assert parsed.value == judge_score_for(seed, response)
        assert 1 <= parsed.value <= 5


def test_judge_score_clamped_to_scale():
    # one-paragraph and five-paragraph responses must stay inside [1, 5]
    short = "Only one paragraph here."
    long = "\n\n".join(f"Paragraph {i}." for i in range(7))
    for seed in range(10):
        assert 1 <= judge_score_for(seed, short) <= 5
        assert 1 <= judge_score_for(seed, long) <= 5


def test_unparsable_first_script_keys_on_retry_nudge():
    prompt = build_rubric_prompt("Say hi.", "Hi there.")
    options = {"judge": "unparsable-first"}
    first = mock_generate(5, prompt, PLAIN, options)
    assert parse_score(first) is None
    retried = mock_generate(5, f"{prompt}\n\n{RETRY_NUDGE}", PLAIN, options)
    assert parse_score(retried) is not None


def test_classifier_returns_oracle_category():
    text = "Write a Python function that merges overlapping intervals."
    reply = mock_generate(0, build_classify_prompt(text), PLAIN)
    assert reply == "coding"
    assert instruction_category(text) == "coding"


def test_fixed_option_short_circuits():
    spec = mock_spec("m", 0, options="fixed=Score%3A%204")
    with make_backend(spec) as backend:
        result = backend.generate("anything", PLAIN)
    assert result.text == "Score: 4"


def test_fail_always_produces_error_results():
    spec = mock_spec("m", 0, options="fail=always")
    with make_backend(spec) as backend:
        result = backend.generate([{"role": "user", "content": "hi"}], PLAIN)
    assert result.finish_reason == FINISH_ERROR
    assert result.error_kind == ERR_EXHAUSTED_RETRIES
    assert result.text == ""
    assert result.attempt_count == backend.retry.max_attempts


def test_stop_sequences_and_token_cap():
    prompt = [{"role": "user", "content": "Explain in detail."}]
    full = mock_generate(8, prompt, PLAIN)
    with make_backend(mock_spec("m", 8)) as backend:
        stopped = backend.generate(prompt, SamplingParams(stop_sequences=("\n\n",)))
        assert stopped.text == full.split("\n\n")[0]
        capped = backend.generate(prompt, SamplingParams(max_new_tokens=5))
        assert capped.finish_reason == FINISH_LENGTH
        assert len(capped.text.split(" ")) == 5


def test_canonical_prompt_flattens_messages():
    assert canonical_prompt("plain") == "plain"
    flat = canonical_prompt(
        [{"role": "user", "content": "a"}, {"role": "assistant", "content": "b"}]
    )
    assert flat == "user: a\nassistant: b"


def test_category_mix_tracks_weights():
    texts = draw_instructions(7, 4000)
    labels = [instruction_category(text) for text in texts]
    junk = sum(1 for label in labels if label is None)
    assert 0.015 < junk / len(labels) < 0.045  # ~3% degenerate draws

    counts = Counter(label for label in labels if label is not None)
    total = sum(counts.values())
    for category, weight in MOCK_CATEGORY_WEIGHTS.items():
        share = 100.0 * counts[category] / total
        assert abs(share - weight) < 3.0, f"{category}: {share:.2f}% vs {weight}%"


def test_draws_are_deterministic():
    assert draw_instructions(7, 50) == draw_instructions(7, 50)
    assert draw_instructions(7, 50) != draw_instructions(8, 50)


def test_committee_specs_helper():
    specs = committee_specs()
    assert len(specs) == 3
    assert len({spec.model_id for spec in specs}) == 3
    assert all(spec.endpoint_kind == "mock" for spec in specs)


def test_mock_backend_type():
    backend = make_backend(mock_spec("m", 1))
    assert isinstance(backend, MockBackend)
    backend.close()
