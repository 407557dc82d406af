import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motiongen.data import normalize, synth_corpus
from motiongen.errors import DomainError, ParseError
from motiongen.instructions import (
    INIT_LAST_WINDOW,
    KEY_COUNT_RANGE,
    InstructionRecord,
    InstructionSample,
    PromptVariant,
    TaskKind,
    build_instruction,
    build_instruction_corpus,
    encode_motion_tokens,
    format_token_indices,
    load_instruction_corpus,
    parse_motion_answer,
    render_full_prompt,
    render_task_prompt,
    sample_pose_condition,
    save_instruction_corpus,
)

# Frozen expected strings for the rendered templates. Any drift here is a
# contract break for downstream prompt consumers.
GOLDEN_PREAMBLE_DEFAULT = (
    "Below is an instruction that describes a task, paired with an input that provides "
    "further context. Write a response that appropriately completes the request."
)
GOLDEN_PREAMBLE_V1 = (
    "Human motion can be represented by token indices by VQ-VAE. Below is an instruction "
    "that describes human motion generation condition types, paired with an input that "
    "provides specific conditions. Write a sequence of tokens matching with given conditions."
)
GOLDEN_V0 = {
    TaskKind.TEXT_ONLY: "Generate a sequence of motion tokens matching the following human motion description.",
    TaskKind.TEXT_INIT: "Generate a sequence of motion tokens matching the following human motion description given the init pose tokens.",
    TaskKind.TEXT_LAST: "Generate a sequence of motion tokens matching the following human motion description given the last pose tokens.",
    TaskKind.TEXT_KEY: "Generate a sequence of motion tokens matching the following human motion description given the key pose tokens.",
}
GOLDEN_V1 = {
    TaskKind.TEXT_ONLY: "Motion description.",
    TaskKind.TEXT_INIT: "Motion description and the init pose tokens.",
    TaskKind.TEXT_LAST: "Motion description and the last pose tokens.",
    TaskKind.TEXT_KEY: "Motion description and the key pose tokens.",
}
GOLDEN_V2 = {
    TaskKind.TEXT_ONLY: "Generate the token sequence of the given human motion description.",
    TaskKind.TEXT_INIT: "Generate the token sequence of the given human motion description under the premise of the given init pose tokens.",
    TaskKind.TEXT_LAST: "Generate the token sequence of the given human motion description under the premise of the given last pose tokens.",
    TaskKind.TEXT_KEY: "Generate the token sequence of the given human motion description under the premise of the given key pose tokens.",
}

GOLDEN_FULL_PROMPT = (
    GOLDEN_PREAMBLE_DEFAULT
    + "\n\n### Instruction:\n"
    + GOLDEN_V0[TaskKind.TEXT_INIT]
    + "\n\n### Input:\n"
    + "a person walks forward<Motion Token>7, 9</Motion Token>"
    + "\n\n### Response:"
)


class TestGoldenPrompts:
    @pytest.mark.parametrize("kind", list(TaskKind))
    def test_v0(self, kind):
        assert render_task_prompt(kind, PromptVariant.V0) == GOLDEN_V0[kind]

    @pytest.mark.parametrize("kind", list(TaskKind))
    def test_v1(self, kind):
        assert render_task_prompt(kind, PromptVariant.V1) == GOLDEN_V1[kind]

    @pytest.mark.parametrize("kind", list(TaskKind))
    def test_v2(self, kind):
        assert render_task_prompt(kind, PromptVariant.V2) == GOLDEN_V2[kind]

    def test_full_prompt_bytes(self):
        sample = build_instruction(TaskKind.TEXT_INIT, "a person walks forward", [7, 9], [1, 2, 3])
        assert render_full_prompt(sample) == GOLDEN_FULL_PROMPT

    def test_full_prompt_with_answer(self):
        sample = build_instruction(TaskKind.TEXT_INIT, "a person walks forward", [7, 9], [1, 2, 3])
        assert render_full_prompt(sample, include_answer=True) == GOLDEN_FULL_PROMPT + "\n1, 2, 3"

    def test_v1_uses_its_own_preamble(self):
        sample = build_instruction(TaskKind.TEXT_ONLY, "x", None, [0], PromptVariant.V1)
        rendered = render_full_prompt(sample)
        assert rendered.startswith(GOLDEN_PREAMBLE_V1)
        assert rendered.endswith("### Response:")

    def test_v2_uses_default_preamble(self):
        sample = build_instruction(TaskKind.TEXT_ONLY, "x", None, [0], PromptVariant.V2)
        assert render_full_prompt(sample).startswith(GOLDEN_PREAMBLE_DEFAULT)


class TestTokenFormatting:
    def test_bare_answer(self):
        assert format_token_indices([7, 9]) == "7, 9"
        assert format_token_indices([5]) == "5"

    def test_wrapped_span(self):
        assert encode_motion_tokens([1, 2, 3]) == "<Motion Token>1, 2, 3</Motion Token>"

    def test_empty_rejected(self):
        with pytest.raises(DomainError):
            format_token_indices([])

    def test_negative_rejected(self):
        with pytest.raises(DomainError):
            format_token_indices([1, -2])


class TestBuildInstruction:
    def test_text_only_rejects_pose(self):
        with pytest.raises(DomainError):
            build_instruction(TaskKind.TEXT_ONLY, "t", [1], [0])

    def test_pose_kind_requires_pose(self):
        with pytest.raises(DomainError):
            build_instruction(TaskKind.TEXT_KEY, "t", None, [0])

    def test_input_contains_span_once(self):
        sample = build_instruction(TaskKind.TEXT_LAST, "hello", [4, 5], [0, 1])
        assert sample.input.count("<Motion Token>") == 1
        assert sample.input == "hello<Motion Token>4, 5</Motion Token>"

    def test_text_only_input_is_plain(self):
        sample = build_instruction(TaskKind.TEXT_ONLY, "hello", None, [0])
        assert sample.input == "hello"


class TestParseAnswer:
    def test_basic(self):
        parsed = parse_motion_answer("7, 9", 64)
        assert parsed.tokens == [7, 9] and not parsed.truncated

    def test_whitespace_separated(self):
        assert parse_motion_answer("1 2  3", 64).tokens == [1, 2, 3]

    def test_stop_markers(self):
        assert parse_motion_answer("1, 2</s>3, 4", 64).tokens == [1, 2]
        assert parse_motion_answer("5, 6</Motion Token>7", 64).tokens == [5, 6]
        assert parse_motion_answer("8, 9### Instruction", 64).tokens == [8, 9]

    def test_longest_valid_prefix(self):
        parsed = parse_motion_answer("1, 2, banana, 3", 64)
        assert parsed.tokens == [1, 2] and parsed.truncated

    def test_strict_raises(self):
        with pytest.raises(ParseError) as err:
            parse_motion_answer("1, banana", 64, strict=True)
        assert err.value.position == 1
        assert err.value.raw_text == "1, banana"

    def test_out_of_range_always_raises(self):
        with pytest.raises(ParseError, match="outside vocabulary"):
            parse_motion_answer("1, 64", 64)

    def test_no_tokens_raises(self):
        with pytest.raises(ParseError):
            parse_motion_answer("nothing here", 64)
        with pytest.raises(ParseError):
            parse_motion_answer("", 64)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 63), min_size=1, max_size=50))
    def test_round_trip_property(self, tokens):
        assert parse_motion_answer(format_token_indices(tokens), 64).tokens == tokens

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 63), min_size=1, max_size=20))
    def test_round_trip_through_span(self, tokens):
        text = encode_motion_tokens(tokens)
        # the close delimiter acts as a stop marker, the open one is stripped
        assert parse_motion_answer(text.removeprefix("<Motion Token>"), 64).tokens == tokens


class TestPoseConditionSampling:
    def test_init_window(self, corpus, vq_model):
        gt = normalize(corpus.motions[0], corpus.stats)
        rng = np.random.default_rng(0)
        frames, tokens, positions = sample_pose_condition(gt, TaskKind.TEXT_INIT, rng, vq_model)
        assert positions == list(range(INIT_LAST_WINDOW))
        assert frames.shape == (INIT_LAST_WINDOW, corpus.feature_dim)
        # condition tokens are a prefix of the full-sequence tokenization
        from motiongen.vqvae import tokenize
        assert tokens == tokenize(vq_model, gt.frames)[: len(tokens)]

    def test_last_window(self, corpus, vq_model):
        gt = normalize(corpus.motions[1], corpus.stats)
        rng = np.random.default_rng(0)
        frames, tokens, positions = sample_pose_condition(gt, TaskKind.TEXT_LAST, rng, vq_model)
        t_crop = (gt.num_frames // 4) * 4
        assert positions == list(range(t_crop - INIT_LAST_WINDOW, t_crop))
        from motiongen.vqvae import tokenize
        assert tokens == tokenize(vq_model, gt.frames)[-len(tokens):]

    def test_key_count_and_bounds(self, corpus, vq_model):
        gt = normalize(corpus.motions[2], corpus.stats)
        lo, hi = KEY_COUNT_RANGE
        t_crop = (gt.num_frames // 4) * 4
        counts = set()
        for seed in range(30):
            rng = np.random.default_rng(seed)
            frames, tokens, positions = sample_pose_condition(gt, TaskKind.TEXT_KEY, rng, vq_model)
            counts.add(len(positions))
            assert lo <= len(positions) <= min(hi, t_crop)
            assert positions == sorted(set(positions))
            assert max(positions) < t_crop
            assert len(tokens) == len({p // 4 for p in positions})
        assert len(counts) > 1  # the count itself varies

    def test_text_only_has_no_condition(self, corpus, vq_model):
        gt = normalize(corpus.motions[0], corpus.stats)
        with pytest.raises(DomainError):
            sample_pose_condition(gt, TaskKind.TEXT_ONLY, np.random.default_rng(0), vq_model)

    def test_too_short_for_keys(self, corpus, vq_model):
        from motiongen.data import MotionSequence
        short = MotionSequence(np.zeros((8, corpus.feature_dim), dtype=np.float32))
        with pytest.raises(DomainError, match="short"):
            sample_pose_condition(short, TaskKind.TEXT_KEY, np.random.default_rng(0), vq_model)


class TestInstructionCorpus:
    def test_one_record_per_annotation_and_kind(self, corpus, records):
        n_train = len(corpus.subset("train").annotations)
        assert len(records) == 4 * n_train
        per_kind = {k: sum(1 for r in records if r.sample.kind == k) for k in TaskKind}
        assert all(v == n_train for v in per_kind.values())

    def test_deterministic(self, corpus, vq_model):
        a = build_instruction_corpus(corpus, vq_model, seed=7)
        b = build_instruction_corpus(corpus, vq_model, seed=7)
        assert [r.to_json() for r in a] == [r.to_json() for r in b]

    def test_jsonl_round_trip(self, tmp_path, records):
        path = tmp_path / "instructions.jsonl"
        save_instruction_corpus(records, path)
        back = load_instruction_corpus(path)
        assert len(back) == len(records)
        for r1, r2 in zip(records, back):
            assert r1.to_json() == r2.to_json()

    def test_jsonl_lines_are_json(self, tmp_path, records):
        path = tmp_path / "instructions.jsonl"
        save_instruction_corpus(records, path)
        for line in path.read_text().splitlines():
            row = json.loads(line)
            assert {"kind", "instruction", "input", "output", "motion_id"} <= set(row)

    def test_record_from_json_defaults(self):
        rec = InstructionRecord.from_json(
            {"kind": "text", "instruction": "i", "input": "x", "output": "1", "motion_id": "m"}
        )
        assert rec.sample.variant == PromptVariant.V0
        assert rec.positions == []

    def test_answers_are_parseable(self, records, vq_model):
        for rec in records:
            parsed = parse_motion_answer(rec.sample.output, vq_model.config.codebook_size)
            assert parsed.tokens and not parsed.truncated
