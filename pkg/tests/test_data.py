import numpy as np
import pytest

from motiongen.data import (
    SYNTH_FAMILIES,
    SYNTH_OFFSET,
    Corpus,
    MotionSequence,
    MotionStats,
    TextAnnotation,
    compute_stats,
    denormalize,
    export_corpus,
    family_of,
    load_dataset,
    normalize,
    read_mfa,
    synth_corpus,
    write_mfa,
)
from motiongen.errors import ConfigError, DataError, DomainError


class TestMfaFormat:
    def test_round_trip(self, tmp_path):
        frames = np.random.default_rng(0).standard_normal((17, 5)).astype(np.float32)
        path = tmp_path / "m.mfa"
        write_mfa(path, frames)
        back = read_mfa(path)
        np.testing.assert_array_equal(back, frames)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.mfa"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(DataError, match="magic"):
            read_mfa(path)

    def test_truncated_payload(self, tmp_path):
        frames = np.zeros((4, 3), dtype=np.float32)
        path = tmp_path / "t.mfa"
        write_mfa(path, frames)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DataError, match="truncated"):
            read_mfa(path)

    def test_rejects_1d(self, tmp_path):
        with pytest.raises(DomainError):
            write_mfa(tmp_path / "x.mfa", np.zeros(5, dtype=np.float32))


class TestStats:
    def test_known_values(self):
        m = MotionSequence(np.array([[0.0, 2.0], [2.0, 2.0]]))
        c = Corpus(motions=[m], annotations=[], splits={"train": [""]})
        stats = compute_stats(c)
        np.testing.assert_allclose(stats.mean, [1.0, 2.0])
        # population std; the constant dim gets floored
        np.testing.assert_allclose(stats.std, [1.0, 1e-6])

    def test_std_floor_positive(self):
        m = MotionSequence(np.zeros((10, 3)))
        stats = compute_stats(Corpus(motions=[m], annotations=[], splits={}))
        assert (stats.std > 0).all()

    def test_normalize_round_trip(self):
        rng = np.random.default_rng(1)
        m = MotionSequence(rng.standard_normal((20, 4)).astype(np.float32))
        stats = MotionStats(rng.standard_normal(4), rng.uniform(0.5, 2.0, 4))
        back = denormalize(normalize(m, stats), stats)
        np.testing.assert_allclose(back.frames, m.frames, atol=1e-5)

    def test_normalize_centers(self):
        m = MotionSequence(np.full((6, 2), 5.0))
        out = normalize(m, MotionStats(np.array([5.0, 5.0]), np.array([2.0, 2.0])))
        np.testing.assert_allclose(out.frames, 0.0)

    def test_dim_mismatch(self):
        m = MotionSequence(np.zeros((4, 3)))
        with pytest.raises(DomainError, match="dim"):
            normalize(m, MotionStats(np.zeros(2), np.ones(2)))

    def test_normalized_corpus_is_standard(self):
        corpus = synth_corpus(seed=5, n_clips=24, feature_dim=6)
        train = corpus.subset("train")
        stacked = np.concatenate([normalize(m, corpus.stats).frames for m in train.motions])
        np.testing.assert_allclose(stacked.mean(axis=0), 0.0, atol=1e-4)
        np.testing.assert_allclose(stacked.std(axis=0), 1.0, atol=1e-3)


class TestSynthCorpus:
    def test_deterministic(self):
        a = synth_corpus(seed=9, n_clips=8, feature_dim=6)
        b = synth_corpus(seed=9, n_clips=8, feature_dim=6)
        for ma, mb in zip(a.motions, b.motions):
            np.testing.assert_array_equal(ma.frames, mb.frames)
        assert [x.text for x in a.annotations] == [x.text for x in b.annotations]

    def test_seed_changes_data(self):
        a = synth_corpus(seed=1, n_clips=4, feature_dim=6)
        b = synth_corpus(seed=2, n_clips=4, feature_dim=6)
        assert not np.array_equal(a.motions[0].frames, b.motions[0].frames)

    def test_family_recovery_by_nearest_centroid(self):
        """The per-family offset makes clips linearly separable: the arg-max
        mean dimension recovers the family exactly."""
        corpus = synth_corpus(seed=11, n_clips=32, feature_dim=8)
        caption = {a.motion_id: a.text for a in corpus.annotations}
        for motion in corpus.motions:
            guess = int(np.argmax(motion.frames.mean(axis=0)))
            assert SYNTH_FAMILIES[guess][0] == family_of(caption[motion.source_id])

    def test_offset_magnitude(self):
        corpus = synth_corpus(seed=0, n_clips=4, feature_dim=8)
        m = corpus.motions[0].frames
        assert abs(m[:, 0].mean() - SYNTH_OFFSET) < 1.0

    def test_lengths_in_range(self):
        corpus = synth_corpus(seed=0, n_clips=12, feature_dim=4, length_range=(16, 16))
        assert all(m.num_frames == 16 for m in corpus.motions)

    def test_splits_disjoint_and_cover(self):
        corpus = synth_corpus(seed=0, n_clips=40, feature_dim=4)
        all_ids = sorted(m.source_id for m in corpus.motions)
        pooled = sorted(sum(corpus.splits.values(), []))
        assert pooled == all_ids
        assert corpus.subset("val").motions and corpus.subset("test").motions

    def test_bad_args(self):
        with pytest.raises(DomainError):
            synth_corpus(seed=0, n_clips=0, feature_dim=4)
        with pytest.raises(DomainError):
            synth_corpus(seed=0, n_clips=4, feature_dim=1)
        with pytest.raises(DomainError):
            synth_corpus(seed=0, n_clips=4, feature_dim=4, length_range=(8, 4))


class TestCorpusModel:
    def test_annotation_must_reference_motion(self):
        m = MotionSequence(np.zeros((4, 2)), source_id="a")
        with pytest.raises(DataError, match="unknown motion"):
            Corpus(motions=[m], annotations=[TextAnnotation("hi", "b")], splits={})

    def test_overlapping_splits_rejected(self):
        m = MotionSequence(np.zeros((4, 2)), source_id="a")
        with pytest.raises(DataError, match="overlap"):
            Corpus(motions=[m], annotations=[], splits={"train": ["a"], "val": ["a"]})

    def test_subset_shares_stats(self):
        corpus = synth_corpus(seed=0, n_clips=16, feature_dim=4)
        assert corpus.subset("val").stats is corpus.stats

    def test_empty_caption_rejected(self):
        with pytest.raises(DataError, match="empty caption"):
            TextAnnotation("   ", "x")

    def test_nonfinite_frames_rejected(self):
        with pytest.raises(DataError, match="non-finite"):
            MotionSequence(np.array([[np.nan, 0.0]]))


class TestDatasetRoundTrip:
    def test_export_then_load(self, tmp_path):
        corpus = synth_corpus(seed=4, n_clips=12, feature_dim=5)
        root = export_corpus(corpus, tmp_path / "ds")
        back = load_dataset(root)
        assert len(back.motions) == 12
        assert back.splits == corpus.splits
        orig = {m.source_id: m.frames for m in corpus.motions}
        for m in back.motions:
            np.testing.assert_array_equal(m.frames, orig[m.source_id])
        np.testing.assert_allclose(back.stats.mean, corpus.stats.mean, atol=1e-6)

    def test_missing_split_file(self, tmp_path):
        corpus = synth_corpus(seed=4, n_clips=6, feature_dim=4)
        root = export_corpus(corpus, tmp_path / "ds")
        (root / "splits" / "val.txt").unlink()
        with pytest.raises(ConfigError, match="val.txt"):
            load_dataset(root)

    def test_width_mismatch_names_file(self, tmp_path):
        corpus = synth_corpus(seed=4, n_clips=6, feature_dim=4)
        root = export_corpus(corpus, tmp_path / "ds")
        bad_id = corpus.splits["train"][1]
        write_mfa(root / "motions" / f"{bad_id}.mfa", np.zeros((8, 3), dtype=np.float32))
        with pytest.raises(DataError, match=bad_id):
            load_dataset(root)

    def test_unsupported_layout(self, tmp_path):
        with pytest.raises(ConfigError, match="layout"):
            load_dataset(tmp_path, layout="bvh")

    def test_stats_from_train_only(self, tmp_path):
        corpus = synth_corpus(seed=4, n_clips=12, feature_dim=4)
        root = export_corpus(corpus, tmp_path / "ds")
        back = load_dataset(root)
        expected = compute_stats(back.subset("train"))
        np.testing.assert_allclose(back.stats.mean, expected.mean)
        np.testing.assert_allclose(back.stats.std, expected.std)
