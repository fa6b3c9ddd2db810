import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

from fairsound.core import (
    ALL_INSTANCES,
    AudioClip,
    EmptyAudioError,
    InstanceEntry,
    InstanceKind,
    Label,
    Manifest,
    ManifestError,
    RngSeed,
    SubjectEntry,
    SubjectRecord,
    derive_rng,
    env_seed,
    load_clip,
    manifest_from_rows,
    normalize_samples,
    read_manifest,
    write_manifest,
    write_wav,
)


def _manifest(ids, n_inst=7):
    recs = []
    for i, sid in enumerate(ids):
        inst = {
            k: InstanceEntry(f"/data/{sid}/{k.file_stem}.wav", 1.0 + 0.25 * j, 16000)
            for j, k in enumerate(ALL_INSTANCES[:n_inst])
        }
        recs.append(SubjectEntry(sid, Label.POSITIVE if i % 2 else Label.NEGATIVE, inst))
    return Manifest(tuple(recs))


class TestLoadClip:
    def test_int16_peak(self, tmp_path):
        p = tmp_path / "a.wav"
        wavfile.write(p, 8000, np.array([0, 32767, -32768, 5], dtype=np.int16))
        clip = load_clip(p)
        assert clip.samples.max() == pytest.approx(32767 / 32768, abs=0)
        assert clip.samples.min() == -1.0
        assert clip.sample_rate == 8000

    def test_all_zero_one_second(self, tmp_path):
        p = tmp_path / "z.wav"
        wavfile.write(p, 16000, np.zeros(16000, dtype=np.int16))
        clip = load_clip(p)
        assert len(clip) == 16000
        assert not clip.samples.any()

    def test_stereo_symmetric_downmix(self, tmp_path):
        p = tmp_path / "s.wav"
        data = np.tile(np.array([[0.5, -0.5]], dtype=np.float32), (100, 1))
        wavfile.write(p, 8000, data)
        clip = load_clip(p)
        assert clip.samples.shape == (100,)
        assert np.all(clip.samples == 0.0)

    def test_float_and_int32(self, tmp_path):
        p = tmp_path / "f.wav"
        wavfile.write(p, 8000, np.array([1.5, -0.25], dtype=np.float32))
        assert load_clip(p).samples.tolist() == [1.0, -0.25]
        p = tmp_path / "i.wav"
        wavfile.write(p, 8000, np.array([2**30], dtype=np.int32))
        assert load_clip(p).samples[0] == 0.5

    def test_unreadable(self, tmp_path):
        p = tmp_path / "bad.wav"
        p.write_bytes(b"not a wav")
        with pytest.raises(OSError):
            load_clip(p)
        with pytest.raises(OSError):
            load_clip(tmp_path / "missing.wav")

    def test_empty(self, tmp_path):
        p = tmp_path / "e.wav"
        wavfile.write(p, 8000, np.zeros(0, dtype=np.int16))
        with pytest.raises(EmptyAudioError):
            load_clip(p)

    def test_write_roundtrip_pcm16(self, tmp_path, rng):
        x = rng.uniform(-0.9, 0.9, 500)
        write_wav(tmp_path / "r.wav", x, 22050)
        clip = load_clip(tmp_path / "r.wav")
        assert np.max(np.abs(clip.samples - x)) <= 0.5 / 32768


def test_normalization_idempotent(rng):
    raw = rng.integers(-32768, 32767, 1000).astype(np.int16)
    once = normalize_samples(raw)
    np.testing.assert_array_equal(normalize_samples(once), once)
    assert once.min() >= -1.0 and once.max() <= 1.0


def test_uint8():
    assert normalize_samples(np.array([0, 128, 255], dtype=np.uint8)).tolist() == [-1.0, 0.0, 127 / 128]


class TestAudioClip:
    def test_validation(self):
        with pytest.raises(ValueError):
            AudioClip(np.zeros(3), 0)
        with pytest.raises(EmptyAudioError):
            AudioClip(np.zeros(0), 8000)

    def test_immutable(self):
        clip = AudioClip([0.1, 0.2], 8000)
        with pytest.raises(ValueError):
            clip.samples[0] = 1.0
        assert clip.duration == 2 / 8000

    def test_subject_record(self):
        a = AudioClip([0.0], 8000, "s1", InstanceKind.VOWEL_A, Label.NEGATIVE)
        rec = SubjectRecord("s1", Label.NEGATIVE, {InstanceKind.VOWEL_A: a})
        assert rec.require([InstanceKind.VOWEL_A]) == [a]
        with pytest.raises(KeyError):
            rec.require([InstanceKind.VOWEL_E])
        with pytest.raises(ValueError):
            rec.require([InstanceKind.VOWEL_A, InstanceKind.VOWEL_A])
        with pytest.raises(ValueError):
            SubjectRecord("s2", Label.NEGATIVE, {InstanceKind.VOWEL_A: a})
        with pytest.raises(ValueError):
            SubjectRecord("s1", Label.POSITIVE, {InstanceKind.VOWEL_A: a})


def test_instance_stems():
    for k in ALL_INSTANCES:
        assert InstanceKind.from_stem(k.file_stem) is k
    with pytest.raises(ValueError):
        InstanceKind.from_stem("cough-shallow")


class TestManifest:
    def test_two_subjects_fourteen_rows(self, tmp_path):
        m = _manifest(["a", "b"])
        write_manifest(tmp_path / "m.jsonl", m)
        lines = (tmp_path / "m.jsonl").read_text().splitlines()
        assert len(lines) == 14
        assert {json.loads(l)["subject_id"] for l in lines} == {"a", "b"}

    def test_roundtrip_unicode(self, tmp_path):
        m = _manifest(["sujet-é", "被験者", "plain"])
        write_manifest(tmp_path / "m.jsonl", m)
        assert read_manifest(tmp_path / "m.jsonl") == m

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.text(min_size=1, max_size=8), min_size=1, max_size=6, unique=True),
           st.integers(1, 7))
    def test_roundtrip_random(self, tmp_path_factory, ids, n_inst):
        path = tmp_path_factory.mktemp("m") / "m.jsonl"
        m = _manifest(ids, n_inst)
        write_manifest(path, m)
        assert read_manifest(path) == m

    def test_duplicate_subject(self):
        with pytest.raises(ManifestError):
            Manifest(_manifest(["a"]).records * 2)

    def test_missing_field(self):
        with pytest.raises(ManifestError, match="missing"):
            manifest_from_rows([{"subject_id": "a", "label": "negative", "instance": "vowel_a"}])

    def test_duplicate_pair_and_label_conflict(self):
        row = {"subject_id": "a", "label": "negative", "instance": "vowel_a", "path": "x",
               "duration_sec": 1.0, "sample_rate": 8000}
        with pytest.raises(ManifestError):
            manifest_from_rows([row, row])
        with pytest.raises(ManifestError):
            manifest_from_rows([row, {**row, "instance": "vowel_e", "label": "positive"}])

    def test_bad_json(self, tmp_path):
        (tmp_path / "m.jsonl").write_text("{oops\n")
        with pytest.raises(ManifestError):
            read_manifest(tmp_path / "m.jsonl")

    def test_check_paths(self, tmp_path):
        m = _manifest(["a"], 1)
        with pytest.raises(ManifestError):
            m.check_paths()


class TestRng:
    def test_same_keys_same_stream(self):
        a = derive_rng(5, "augment", "s1", InstanceKind.VOWEL_A, 3).random(4)
        b = derive_rng(5, "augment", "s1", InstanceKind.VOWEL_A, 3).random(4)
        np.testing.assert_array_equal(a, b)

    def test_keys_separate_streams(self):
        a = derive_rng(5, "augment", "s1", 3).random(4)
        assert not np.array_equal(a, derive_rng(5, "augment", "s1", 4).random(4))
        assert not np.array_equal(a, derive_rng(6, "augment", "s1", 3).random(4))

    def test_rngseed_range(self):
        with pytest.raises(ValueError):
            RngSeed(-1)
        RngSeed(2**64 - 1)

    def test_env_seed(self, monkeypatch):
        monkeypatch.delenv("FAIRSOUND_SEED", raising=False)
        assert env_seed(3) == 3
        monkeypatch.setenv("FAIRSOUND_SEED", "11")
        assert env_seed(3) == 11
