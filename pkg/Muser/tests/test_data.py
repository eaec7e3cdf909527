import json
import wave
from pathlib import Path

import numpy as np
import pytest

from muser.core.data import (
    DatasetRecord,
    class_frequency,
    fuse_datasets,
    gtzan_records,
    load_metadata,
    mtt_records,
    read_matrix,
    read_wav,
    save_dataset,
    split_dataset,
    synth_dataset,
    write_matrix,
    write_metadata,
    write_wav,
)
from muser.core.errors import DataError, UsageError
from muser.core.signal import AudioClip, stft
from muser.core.text import DEFAULT_TEMPLATE, TemplateSpec, render_available, render_template


def _tone(seconds: float = 1.0, rate: int = 8000, freq: float = 440.0) -> AudioClip:
    t = np.arange(int(seconds * rate)) / rate
    return AudioClip(0.5 * np.sin(2 * np.pi * freq * t), rate)


def _raw_wav(path: Path, channels: int = 1, width: int = 2, frames: bytes = b"") -> Path:
    with wave.open(str(path), "wb") as f:
        f.setnchannels(channels)
        f.setsampwidth(width)
        f.setframerate(8000)
        f.writeframes(frames)
    return path


# -- WAV ---------------------------------------------------------------------

def test_wav_round_trip(tmp_path: Path) -> None:
    clip = _tone()
    back = read_wav(write_wav(tmp_path / "tone.wav", clip))
    assert back.sample_rate_hz == 8000
    assert np.max(np.abs(back.samples - clip.samples)) <= 1 / 32768


def test_wav_empty_data_chunk(tmp_path: Path) -> None:
    with pytest.raises(DataError, match="empty"):
        read_wav(_raw_wav(tmp_path / "empty.wav"))


def test_wav_stereo_rejected(tmp_path: Path) -> None:
    with pytest.raises(DataError, match="mono required"):
        read_wav(_raw_wav(tmp_path / "stereo.wav", channels=2, frames=b"\x00" * 16))


def test_wav_8bit_rejected(tmp_path: Path) -> None:
    with pytest.raises(DataError, match="PCM16 required"):
        read_wav(_raw_wav(tmp_path / "u8.wav", width=1, frames=b"\x80" * 16))


def test_wav_truncated_and_missing(tmp_path: Path) -> None:
    path = write_wav(tmp_path / "tone.wav", _tone(0.1))
    path.write_bytes(path.read_bytes()[:-101])
    with pytest.raises(DataError):
        read_wav(path)
    with pytest.raises(DataError, match="not found"):
        read_wav(tmp_path / "nope.wav")


def test_wav_chunk_size_past_end(tmp_path: Path) -> None:
    path = write_wav(tmp_path / "tone.wav", _tone(0.05))
    blob = bytearray(path.read_bytes())
    blob[16:20] = (0x6F10).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(DataError, match="malformed WAV"):
        read_wav(path)


def test_wav_fuzz_never_crashes(tmp_path: Path) -> None:
    blob = write_wav(tmp_path / "tone.wav", _tone(0.05)).read_bytes()
    rng = np.random.default_rng(0)
    target = tmp_path / "fuzz.wav"
    for _ in range(300):
        mutated = bytearray(blob)
        for pos in rng.integers(0, 64, size=int(rng.integers(1, 6))):
            mutated[int(pos)] = int(rng.integers(0, 256))
        target.write_bytes(bytes(mutated[: int(rng.integers(0, len(mutated) + 1))]))
        try:
            clip = read_wav(target)
        except DataError:
            continue
        assert isinstance(clip, AudioClip)


# -- metadata ----------------------------------------------------------------

def _write_lines(path: Path, objs) -> Path:
    path.write_text("".join(json.dumps(o) + "\n" for o in objs), encoding="utf-8")
    return path


def test_metadata_empty_file(tmp_path: Path) -> None:
    path = tmp_path / "meta.jsonl"
    path.write_text("", encoding="utf-8")
    assert load_metadata(path) == []


def test_metadata_sorted_and_preserves_fields(tmp_path: Path) -> None:
    path = _write_lines(
        tmp_path / "meta.jsonl",
        [
            {"id": "b", "audio_path": "b.wav", "metadata": {"genre": "rock", "tag": "guitar", "style": "loud", "mood": "x"}, "labels": ["rock"]},
            {"id": "a", "audio_path": "a.wav", "metadata": {"genre": "jazz"}, "labels": ["jazz"]},
        ],
    )
    records = load_metadata(path)
    assert [r.id for r in records] == ["a", "b"]
    assert records[1].metadata["mood"] == "x"
    assert records[1].audio == tmp_path / "b.wav"
    spec = TemplateSpec(DEFAULT_TEMPLATE)
    assert render_available(spec, records[1].metadata) == render_template(spec, records[1].metadata)


def test_metadata_errors(tmp_path: Path) -> None:
    dup = _write_lines(tmp_path / "dup.jsonl", [{"id": "x", "audio_path": "a.wav"}, {"id": "x", "audio_path": "b.wav"}])
    with pytest.raises(DataError, match="'x'"):
        load_metadata(dup)
    missing = _write_lines(tmp_path / "missing.jsonl", [{"id": "x"}])
    with pytest.raises(DataError, match="line 1"):
        load_metadata(missing)
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "a", "audio_path": "a.wav"}\n{not json\n', encoding="utf-8")
    with pytest.raises(DataError, match="line 2"):
        load_metadata(bad)
    with pytest.raises(DataError, match="not found"):
        load_metadata(tmp_path / "absent.jsonl")


def test_metadata_fuzz_never_crashes(tmp_path: Path) -> None:
    good = _write_lines(
        tmp_path / "meta.jsonl",
        [{"id": f"r{i}", "audio_path": f"{i}.wav", "metadata": {"genre": "g"}, "labels": ["g"]} for i in range(4)],
    ).read_bytes()
    rng = np.random.default_rng(1)
    target = tmp_path / "fuzz.jsonl"
    for _ in range(300):
        mutated = bytearray(good)
        for pos in rng.integers(0, len(good), size=int(rng.integers(1, 4))):
            mutated[int(pos)] = int(rng.integers(0, 256))
        target.write_bytes(bytes(mutated))
        try:
            load_metadata(target)
        except DataError:
            pass


def test_save_and_reload(tmp_path: Path) -> None:
    records = synth_dataset(2, 2, clip_seconds=0.1, seed=3)
    path = save_dataset(records, tmp_path / "ds")
    loaded = load_metadata(path)
    assert [r.id for r in loaded] == [r.id for r in records]
    assert all((tmp_path / "ds" / "audio" / f"{r.id}.wav").exists() for r in records)
    for before, after in zip(records, loaded):
        assert after.metadata == before.metadata and after.labels == before.labels
        assert np.max(np.abs(after.load_audio().samples - before.load_audio().samples)) <= 1 / 32768
    with pytest.raises(UsageError):
        write_metadata(tmp_path / "x.jsonl", records)


def test_fuse_and_split() -> None:
    a = synth_dataset(2, 4, clip_seconds=0.05, seed=0)
    b = [DatasetRecord("other_1", a[0].audio, {"tag": "piano"}, ["piano"])]
    fused = fuse_datasets(b, a)
    assert [r.id for r in fused] == sorted(r.id for r in a + b)
    with pytest.raises(DataError, match="duplicate"):
        fuse_datasets(a, a[:1])
    train, test = split_dataset(a, 0.25, seed=4)
    assert len(test) == 2 and len(train) == 6
    assert sorted(r.labels[0] for r in test) == ["genre_0", "genre_1"]
    again = split_dataset(a, 0.25, seed=4)
    assert [[r.id for r in part] for part in again] == [[r.id for r in train], [r.id for r in test]]
    with pytest.raises(UsageError):
        split_dataset(a, 1.0, seed=0)


# -- synthetic corpus --------------------------------------------------------

def test_synth_counts_and_determinism() -> None:
    a = synth_dataset(4, 32, clip_seconds=0.1, seed=7)
    b = synth_dataset(4, 32, clip_seconds=0.1, seed=7)
    assert len(a) == 128
    assert sorted({r.labels[0] for r in a}) == [f"genre_{k}" for k in range(4)]
    assert all(sum(r.labels[0] == f"genre_{k}" for r in a) == 32 for k in range(4))
    for x, y in zip(a, b):
        assert x.id == y.id and x.metadata == y.metadata
        assert np.array_equal(x.audio.samples, y.audio.samples)
    assert abs(np.abs(a[0].audio.samples).max() - 0.9) < 1e-12


def test_synth_tagging_labels() -> None:
    records = synth_dataset(3, 5, clip_seconds=0.05, task="tagging")
    assert all(r.labels == [r.metadata["tag"]] for r in records)


def test_synth_guards() -> None:
    with pytest.raises(UsageError):
        synth_dataset(1, 4)
    with pytest.raises(UsageError):
        synth_dataset(4, 0)
    # f_k for k = 9 is 110 * 2**4.5 = 2489 Hz, above Nyquist at 4 kHz
    with pytest.raises(UsageError, match="alias"):
        synth_dataset(10, 1, rate=4000)


def test_synth_spectral_peak_at_base_frequency() -> None:
    rate, frame_len = 8000, 512
    for record in synth_dataset(4, 4, seed=2):
        k = int(record.labels[0].split("_")[1])
        expected = class_frequency(k) * frame_len / rate
        spec = stft(record.audio, frame_len, 256, log_compress=False)
        peaks = np.argmax(spec.mags, axis=0)
        assert np.mean(np.abs(peaks - expected) <= 1.0) >= 0.9


def test_synth_nearest_centroid_separable() -> None:
    records = synth_dataset(4, 16, seed=5)
    feats = np.stack([stft(r.audio).mags.mean(axis=1) for r in records])
    labels = np.array([int(r.labels[0].split("_")[1]) for r in records])
    train = np.arange(len(records)) % 2 == 0
    centroids = np.stack([feats[train & (labels == k)].mean(axis=0) for k in range(4)])
    dists = ((feats[~train, None, :] - centroids[None]) ** 2).sum(axis=2)
    assert np.mean(np.argmin(dists, axis=1) == labels[~train]) >= 0.9


# -- benchmark adapters ------------------------------------------------------

def test_gtzan_layout(tmp_path: Path) -> None:
    for genre in ("jazz", "blues"):
        for i in range(2):
            write_wav(tmp_path / genre / f"{genre}.{i:05d}.wav", _tone(0.05))
    records = gtzan_records(tmp_path)
    assert [r.id for r in records] == ["blues.00000", "blues.00001", "jazz.00000", "jazz.00001"]
    assert records[0].labels == ["blues"] and records[0].metadata == {"genre": "blues"}


def test_mtt_annotations(tmp_path: Path) -> None:
    lines = [
        "clip_id\tguitar\tpiano\trare\tmp3_path",
        '"2"\t"1"\t"0"\t"0"\t"f/two.mp3"',
        '"1"\t"1"\t"1"\t"1"\t"f/one.mp3"',
        '"3"\t"0"\t"1"\t"0"\t"f/three.mp3"',
    ]
    ann = tmp_path / "annotations_final.csv"
    ann.write_text("\n".join(lines) + "\n", encoding="utf-8")
    records = mtt_records(ann, tmp_path, top_k=2)
    assert [r.id for r in records] == ["1", "2", "3"]
    assert records[0].labels == ["guitar", "piano"]
    assert records[0].audio == tmp_path / "f" / "one.wav"
    assert records[2].metadata == {"tag": "piano"}
    ann.write_text(lines[0] + "\n" + '"1"\t"x"\t"0"\t"0"\t"a.mp3"\n', encoding="utf-8")
    with pytest.raises(DataError, match="line 2"):
        mtt_records(ann, tmp_path)


# -- MUSERMAT ----------------------------------------------------------------

def test_matrix_round_trip(tmp_path: Path) -> None:
    m = np.random.default_rng(0).normal(size=(7, 5))
    path = write_matrix(tmp_path / "m.mat", m)
    back = read_matrix(path)
    assert back.tobytes() == m.tobytes()
    assert path.stat().st_size == 20 + 7 * 5 * 8
    assert write_matrix(tmp_path / "m2.mat", back).read_bytes() == path.read_bytes()


def test_matrix_errors(tmp_path: Path) -> None:
    path = write_matrix(tmp_path / "m.mat", np.ones((3, 3)))
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(DataError, match="does not match"):
        read_matrix(path)
    path.write_bytes(b"NOTAMAT!" + blob[8:])
    with pytest.raises(DataError, match="MUSERMAT"):
        read_matrix(path)
    path.write_bytes(blob[:10])
    with pytest.raises(DataError):
        read_matrix(path)
