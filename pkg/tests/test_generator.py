import numpy as np
import pytest
import torch

from motiongen.data import normalize
from motiongen.errors import DomainError, GenerationError
from motiongen.generator import (
    BatchOutput,
    ModelBundle,
    SamplingConfig,
    batch_generate,
    build_prompt_ids,
    generate_motion,
    generate_tokens,
    replay_record,
)
from motiongen.instructions import TaskKind, build_instruction
from motiongen.lm import LoraConfig, TrainSchedule, train_lm


@pytest.fixture(scope="module")
def bundle(vq_model, _base_lm, vocab, corpus, records):
    import copy

    model = copy.deepcopy(_base_lm)
    schedule = TrainSchedule(steps=300, batch_size=8, micro_batch=4, seed=0, lr=1e-3)
    train_lm(records, model, LoraConfig(r=8, alpha=16), schedule)
    return ModelBundle(vqvae=vq_model, lm=model, vocab=vocab, stats=corpus.stats)


class TestSamplingConfig:
    def test_validation(self):
        with pytest.raises(DomainError):
            SamplingConfig(mode="beam")
        with pytest.raises(DomainError):
            SamplingConfig(max_new_tokens=0)
        with pytest.raises(DomainError):
            SamplingConfig(temperature=0.0)


class TestGenerateTokens:
    def test_budget_respected(self, bundle):
        sample = bundle_records_prompt(bundle)
        cfg = SamplingConfig(max_new_tokens=3)
        ids, reason = generate_tokens(bundle.lm, sample, cfg, bundle.vocab.eos_id)
        assert len(ids) <= 3
        assert reason in ("eos", "max_len")

    def test_greedy_is_deterministic(self, bundle):
        prompt = bundle_records_prompt(bundle)
        cfg = SamplingConfig(mode="greedy", max_new_tokens=8)
        a, _ = generate_tokens(bundle.lm, prompt, cfg, bundle.vocab.eos_id)
        b, _ = generate_tokens(bundle.lm, prompt, cfg, bundle.vocab.eos_id)
        assert a == b

    def test_seeded_sampling_deterministic(self, bundle):
        prompt = bundle_records_prompt(bundle)
        for mode in ("top-k", "temperature"):
            cfg = SamplingConfig(mode=mode, max_new_tokens=8, seed=11)
            a, _ = generate_tokens(bundle.lm, prompt, cfg, bundle.vocab.eos_id)
            b, _ = generate_tokens(bundle.lm, prompt, cfg, bundle.vocab.eos_id)
            assert a == b

    def test_seed_changes_samples(self, bundle):
        prompt = bundle_records_prompt(bundle)
        outs = set()
        for seed in range(5):
            cfg = SamplingConfig(mode="temperature", temperature=2.0, max_new_tokens=8, seed=seed)
            ids, _ = generate_tokens(bundle.lm, prompt, cfg, bundle.vocab.eos_id)
            outs.add(tuple(ids))
        assert len(outs) > 1

    def test_prompt_too_long(self, bundle):
        long_prompt = [0] * (bundle.lm.cfg.max_seq_len - 2)
        with pytest.raises(DomainError, match="max_seq_len"):
            generate_tokens(bundle.lm, long_prompt, SamplingConfig(max_new_tokens=8), 0)


def bundle_records_prompt(bundle):
    sample = build_instruction(TaskKind.TEXT_ONLY, "a person performs a wave slow motion", None, [0])
    return build_prompt_ids(sample, bundle.vocab)


class TestPromptIds:
    def test_ends_at_response_marker(self, vocab):
        sample = build_instruction(TaskKind.TEXT_ONLY, "hello", None, [5, 6])
        ids = build_prompt_ids(sample, vocab)
        assert ids[-1] == vocab.structural_id("### Response:")
        assert vocab.motion_id(5) not in ids

    def test_independent_of_answer(self, vocab):
        a = build_instruction(TaskKind.TEXT_ONLY, "hello", None, [1])
        b = build_instruction(TaskKind.TEXT_ONLY, "hello", None, [2, 3, 4])
        assert build_prompt_ids(a, vocab) == build_prompt_ids(b, vocab)


class TestGenerateMotion:
    def test_text_only(self, bundle, corpus):
        result = generate_motion(
            TaskKind.TEXT_ONLY, "a person performs a wave slow motion", None, bundle,
            SamplingConfig(max_new_tokens=12),
        )
        assert result.motion.frames.shape[1] == corpus.feature_dim
        assert result.motion.frames.shape[0] == 4 * len(result.tokens)
        assert all(0 <= t < 64 for t in result.tokens)
        assert result.stop_reason in ("eos", "max_len", "parse_stop")

    def test_pose_condition_path(self, bundle, corpus):
        cond = corpus.motions[0].frames[:4]
        result = generate_motion(
            TaskKind.TEXT_INIT, "a person performs a wave slow motion", cond, bundle,
            SamplingConfig(max_new_tokens=12),
        )
        assert len(result.tokens) >= 1

    def test_text_only_rejects_condition(self, bundle):
        with pytest.raises(DomainError):
            generate_motion(TaskKind.TEXT_ONLY, "x", np.zeros((4, 8)), bundle, SamplingConfig())

    def test_pose_task_requires_condition(self, bundle):
        with pytest.raises(DomainError):
            generate_motion(TaskKind.TEXT_LAST, "x", None, bundle, SamplingConfig())

    def test_precomputed_tokens(self, bundle):
        result = generate_motion(
            TaskKind.TEXT_INIT, "a person performs a wave slow motion", None, bundle,
            SamplingConfig(max_new_tokens=12), pose_tokens=[3],
        )
        assert result.tokens

    def test_unparseable_answer_raises_generation_error(self, bundle, vocab):
        """A sabotaged head that always emits a non-motion token must surface
        as GenerationError carrying the raw answer."""
        import copy
        broken = copy.deepcopy(bundle)
        with torch.no_grad():
            broken.lm.head.weight.zero_()
            broken.lm.head.weight[vocab.structural_id("<pad>")] = 1.0
        with pytest.raises(GenerationError) as err:
            generate_motion(TaskKind.TEXT_ONLY, "x", None, broken, SamplingConfig(max_new_tokens=4))
        assert err.value.raw_answer is not None


class TestReplayAndBatch:
    def test_replay_matches_record_condition(self, bundle, records):
        rec = next(r for r in records if r.sample.kind == TaskKind.TEXT_ONLY)
        result = replay_record(rec, bundle, SamplingConfig(max_new_tokens=16))
        assert result.motion.source_id == rec.motion_id

    def test_batch_preserves_order_and_count(self, bundle, records):
        subset = records[:10]
        out = batch_generate(subset, bundle, SamplingConfig(max_new_tokens=8))
        assert len(out.items) == 10
        assert [it.record.motion_id for it in out.items] == [r.motion_id for r in subset]

    def test_batch_task_filter(self, bundle, records):
        out = batch_generate(records[:12], bundle, SamplingConfig(max_new_tokens=8),
                             task=TaskKind.TEXT_KEY)
        assert all(it.record.sample.kind == TaskKind.TEXT_KEY for it in out.items)

    def test_batch_empty(self, bundle):
        out = batch_generate([], bundle, SamplingConfig())
        assert out.items == [] and out.failures == 0

    def test_batch_records_failures_not_fatal(self, bundle, records, vocab):
        import copy
        broken = copy.deepcopy(bundle)
        with torch.no_grad():
            broken.lm.head.weight.zero_()
            broken.lm.head.weight[vocab.structural_id("<pad>")] = 1.0
        out = batch_generate(records[:5], broken, SamplingConfig(max_new_tokens=4))
        assert len(out.items) == 5
        assert out.failures == 5
        assert all(it.error for it in out.items)
        assert out.successes == []

    def test_failures_property(self):
        out = BatchOutput(items=[])
        assert out.failures == 0 and out.successes == []
