"""Datasets, audio ingestion and on-disk formats.

Records are stored one JSON object per line::

    {"id": "...", "audio_path": "audio/x.wav", "metadata": {"genre": "..."}, "labels": ["..."]}

``audio_path`` is resolved relative to the metadata file. ``labels`` holds
class names for the genre task (exactly one) or the positive tags for the
tagging task. Benchmark layouts (GTZAN folders, the MagnaTagATune
annotation table) are converted into the same records.

Also here: PCM16 mono WAV reading/writing, the synthetic desk-scale corpus
and the MUSERMAT matrix format.
"""
from __future__ import annotations

import csv
import json
import logging
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from .errors import DataError, UsageError
from .signal import AudioClip

logger = logging.getLogger(__name__)

MATRIX_MAGIC = b"MUSERMAT"
MATRIX_VERSION = 1
_MATRIX_HEADER = struct.Struct("<8sIII")

TAG_WORDS = [
    ("guitar", "strings"), ("piano", "keys"), ("drums", "beat"), ("synth", "electronic"),
    ("vocal", "choir"), ("bass", "low"), ("flute", "wind"), ("violin", "orchestral"),
]
STYLE_WORDS = [
    ("loud", "energetic"), ("soft", "calm"), ("fast", "upbeat"), ("slow", "mellow"),
    ("dark", "heavy"), ("bright", "happy"), ("dreamy", "ambient"), ("raw", "gritty"),
]


@dataclass
class DatasetRecord:
    id: str
    audio: Union[AudioClip, Path]
    metadata: Dict[str, str] = field(default_factory=dict)
    labels: List[str] = field(default_factory=list)

    def load_audio(self) -> AudioClip:
        if isinstance(self.audio, AudioClip):
            return self.audio
        return read_wav(self.audio)


# -- WAV ---------------------------------------------------------------------

def read_wav(path: Union[str, Path]) -> AudioClip:
    """Read a PCM16 mono WAV file, scaling samples by 1/32768."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"audio file not found: {path}")
    try:
        with wave.open(str(path), "rb") as wav_file:
            channels = wav_file.getnchannels()
            width = wav_file.getsampwidth()
            rate = wav_file.getframerate()
            n_frames = wav_file.getnframes()
            raw = wav_file.readframes(n_frames)
    except (
        wave.Error, EOFError, OSError, struct.error, ValueError, OverflowError, ZeroDivisionError, RuntimeError
    ) as e:
        raise DataError(f"{path}: malformed WAV file ({e})") from None
    if channels != 1:
        raise DataError(f"{path}: mono required, file has {channels} channels")
    if width != 2:
        raise DataError(f"{path}: PCM16 required, file has {8 * width}-bit samples")
    if n_frames == 0:
        raise DataError(f"{path}: data chunk is empty")
    if len(raw) != 2 * n_frames:
        raise DataError(f"{path}: data chunk truncated ({len(raw)} of {2 * n_frames} bytes)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples, rate)


def write_wav(path: Union[str, Path], clip: AudioClip) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wav_file:
        wav_file.setnchannels(1)
        wav_file.setsampwidth(2)
        wav_file.setframerate(clip.sample_rate_hz)
        wav_file.writeframes(pcm.tobytes())
    return path


# -- metadata lines ----------------------------------------------------------

def _parse_record(obj: object, base: Path, lineno: int) -> DatasetRecord:
    if not isinstance(obj, dict):
        raise DataError(f"line {lineno}: expected a JSON object")
    rec_id = obj.get("id")
    if not isinstance(rec_id, str) or not rec_id:
        raise DataError(f"line {lineno}: missing or empty id")
    audio_path = obj.get("audio_path")
    if not isinstance(audio_path, str) or not audio_path:
        raise DataError(f"line {lineno}: record {rec_id!r} has no audio_path")
    metadata = obj.get("metadata", {})
    if not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values()):
        raise DataError(f"line {lineno}: metadata must map field names to strings")
    labels = obj.get("labels", [])
    if not isinstance(labels, list) or not all(isinstance(v, str) for v in labels):
        raise DataError(f"line {lineno}: labels must be a list of strings")
    return DatasetRecord(rec_id, base / audio_path, dict(metadata), list(labels))


def load_metadata(path: Union[str, Path]) -> List[DatasetRecord]:
    """Read a metadata file; records come back sorted by id."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"metadata file not found: {path}")
    records: List[DatasetRecord] = []
    seen: Dict[str, int] = {}
    try:
        text = path.read_bytes().decode("utf-8")
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: not UTF-8 text ({e.reason})") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: line {lineno}: malformed JSON ({e.msg})") from None
        record = _parse_record(obj, path.parent, lineno)
        if record.id in seen:
            raise DataError(
                f"{path}: line {lineno}: duplicate id {record.id!r} (first on line {seen[record.id]})"
            )
        seen[record.id] = lineno
        records.append(record)
    records.sort(key=lambda r: r.id)
    logger.debug("loaded %d records from %s", len(records), path)
    return records


def write_metadata(path: Union[str, Path], records: Iterable[DatasetRecord]) -> Path:
    """Write records as metadata lines; in-memory audio must already be on disk."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for record in records:
        if isinstance(record.audio, AudioClip):
            raise UsageError(f"record {record.id!r} has no audio file; write its WAV first")
        audio = Path(record.audio)
        try:
            rel = audio.resolve().relative_to(path.parent.resolve()).as_posix()
        except ValueError:
            rel = str(audio.resolve())
        obj = {"id": record.id, "audio_path": rel, "metadata": record.metadata, "labels": record.labels}
        lines.append(json.dumps(obj, sort_keys=True))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    tmp.replace(path)
    return path


def fuse_datasets(*datasets: Sequence[DatasetRecord]) -> List[DatasetRecord]:
    """Concatenate datasets with different annotations into one, sorted by id."""
    fused: Dict[str, DatasetRecord] = {}
    for dataset in datasets:
        for record in dataset:
            if record.id in fused:
                raise DataError(f"duplicate id {record.id!r} across fused datasets")
            fused[record.id] = record
    return [fused[k] for k in sorted(fused)]


def stratified_order(records: Sequence[DatasetRecord], seed: int) -> List[int]:
    """Indices shuffled within each first-label class, then interleaved class by class.

    Every prefix of the result is as class-balanced as the data allows.
    """
    rng = np.random.default_rng(seed)
    by_class: Dict[str, List[int]] = {}
    for i, record in enumerate(records):
        key = record.labels[0] if record.labels else ""
        by_class.setdefault(key, []).append(i)
    queues = [list(rng.permutation(by_class[k])) for k in sorted(by_class)]
    order: List[int] = []
    while any(queues):
        for queue in queues:
            if queue:
                order.append(int(queue.pop(0)))
    return order


def split_dataset(
    records: Sequence[DatasetRecord], test_fraction: float, seed: int
) -> Tuple[List[DatasetRecord], List[DatasetRecord]]:
    """Deterministic class-stratified (train, test) split."""
    if not 0.0 < test_fraction < 1.0:
        raise UsageError(f"test fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    by_class: Dict[str, List[int]] = {}
    for i, record in enumerate(records):
        by_class.setdefault(record.labels[0] if record.labels else "", []).append(i)
    test_idx = set()
    for key in sorted(by_class):
        members = rng.permutation(by_class[key])
        n_test = int(round(test_fraction * len(members)))
        test_idx.update(int(i) for i in members[:n_test])
    train = [r for i, r in enumerate(records) if i not in test_idx]
    test = [r for i, r in enumerate(records) if i in test_idx]
    return train, test


# -- synthetic corpus --------------------------------------------------------

def class_frequency(k: int) -> float:
    return 110.0 * 2.0 ** (k / 2.0)


def _class_words(table: List[Tuple[str, str]], k: int, prefix: str) -> Tuple[str, str]:
    if k < len(table):
        return table[k]
    return (f"{prefix}{k}a", f"{prefix}{k}b")


def synth_dataset(
    n_classes: int,
    n_per_class: int,
    clip_seconds: float = 1.0,
    rate: int = 8000,
    seed: int = 0,
    *,
    task: str = "genre",
    noise: float = 0.05,
) -> List[DatasetRecord]:
    """Harmonic tones, one base frequency per class, with class-linked metadata.

    Class ``k`` sums sinusoids at ``f_k``, ``2 f_k`` and ``3 f_k`` (amplitudes
    1, 1/2, 1/3) with ``f_k = 110 * 2**(k/2)`` Hz and random phases, adds Gaussian noise and
    peak-normalizes to 0.9. ``task="genre"`` labels records with their genre,
    ``task="tagging"`` with their tag word.
    """
    if n_classes < 2:
        raise UsageError(f"need at least 2 classes, got {n_classes}")
    if n_per_class < 1:
        raise UsageError(f"need at least 1 example per class, got {n_per_class}")
    if task not in ("genre", "tagging"):
        raise UsageError(f"task must be 'genre' or 'tagging', got {task!r}")
    top = class_frequency(n_classes - 1)
    if top >= rate / 2:
        raise UsageError(f"class frequency {top:.1f} Hz aliases at sample rate {rate} Hz")
    length = int(round(clip_seconds * rate))
    if length < 1:
        raise UsageError(f"clip of {clip_seconds} s at {rate} Hz has no samples")
    rng = np.random.default_rng(seed)
    t = np.arange(length) / rate
    records: List[DatasetRecord] = []
    for k in range(n_classes):
        f_k = class_frequency(k)
        tags = _class_words(TAG_WORDS, k, "tag")
        styles = _class_words(STYLE_WORDS, k, "style")
        for i in range(n_per_class):
            phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
            x = sum(np.sin(2.0 * np.pi * h * f_k * t + phases[h - 1]) / h for h in (1, 2, 3))
            x = x + rng.normal(0.0, noise, size=length)
            x = 0.9 * x / np.abs(x).max()
            genre = f"genre_{k}"
            tag = tags[int(rng.integers(2))]
            style = styles[int(rng.integers(2))]
            records.append(
                DatasetRecord(
                    id=f"synth_{k:02d}_{i:04d}",
                    audio=AudioClip(x, rate),
                    metadata={"genre": genre, "tag": tag, "style": style},
                    labels=[genre] if task == "genre" else [tag],
                )
            )
    return records


def save_dataset(records: Sequence[DatasetRecord], out_dir: Union[str, Path], name: str = "metadata.jsonl") -> Path:
    """Write in-memory clips as WAV files under ``out_dir/audio`` plus a metadata file."""
    out_dir = Path(out_dir)
    stored = []
    for record in records:
        audio = record.audio
        if isinstance(audio, AudioClip):
            audio = write_wav(out_dir / "audio" / f"{record.id}.wav", audio)
        stored.append(DatasetRecord(record.id, Path(audio), record.metadata, record.labels))
    return write_metadata(out_dir / name, stored)


# -- benchmark adapters ------------------------------------------------------

def gtzan_records(root: Union[str, Path]) -> List[DatasetRecord]:
    """``root/<genre>/<clip>.wav`` folders become genre-labelled records."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"GTZAN root is not a directory: {root}")
    records = []
    for genre_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for wav_path in sorted(genre_dir.glob("*.wav")):
            records.append(
                DatasetRecord(
                    id=wav_path.stem,
                    audio=wav_path,
                    metadata={"genre": genre_dir.name},
                    labels=[genre_dir.name],
                )
            )
    return fuse_datasets(records)


def mtt_records(
    annotations: Union[str, Path], root: Union[str, Path], top_k: int = 50
) -> List[DatasetRecord]:
    """Tab-separated MagnaTagATune annotations restricted to the ``top_k`` tags.

    Audio is expected next to the original ``mp3_path`` as a ``.wav`` file.
    """
    annotations, root = Path(annotations), Path(root)
    if not annotations.exists():
        raise DataError(f"annotation file not found: {annotations}")
    with annotations.open("r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f, delimiter="\t"))
    if not rows:
        raise DataError(f"{annotations}: empty annotation file")
    header = [h.strip('"') for h in rows[0]]
    if header[0] != "clip_id" or header[-1] != "mp3_path":
        raise DataError(f"{annotations}: expected clip_id ... mp3_path columns")
    tag_names = header[1:-1]
    body = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{annotations}: line {lineno}: expected {len(header)} columns")
        body.append([c.strip('"') for c in row])
    counts = np.zeros(len(tag_names), dtype=np.int64)
    for lineno, row in enumerate(body, start=2):
        if any(v not in ("0", "1") for v in row[1:-1]):
            raise DataError(f"{annotations}: line {lineno}: tag columns must be 0 or 1")
        counts += np.array([int(v) for v in row[1:-1]], dtype=np.int64)
    keep = sorted(np.argsort(-counts, kind="stable")[:top_k])
    records = []
    for row in body:
        tags = [tag_names[j] for j in keep if row[1 + j] == "1"]
        records.append(
            DatasetRecord(
                id=row[0],
                audio=(root / row[-1]).with_suffix(".wav"),
                metadata={"tag": " ".join(tags)} if tags else {},
                labels=tags,
            )
        )
    return fuse_datasets(records)


# -- MUSERMAT ----------------------------------------------------------------

def write_matrix(path: Union[str, Path], m: object) -> Path:
    """Header (magic, version, rows, cols) then little-endian float64 payload."""
    arr = np.asarray(m.detach().cpu().numpy() if hasattr(m, "detach") else m, dtype=np.float64)
    if arr.ndim != 2:
        raise UsageError(f"matrix must be 2-D, got shape {arr.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows, cols = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    path.write_bytes(_MATRIX_HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, rows, cols) + payload)
    return path


def read_matrix(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"matrix file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < _MATRIX_HEADER.size:
        raise DataError(f"{path}: truncated matrix header")
    magic, version, rows, cols = _MATRIX_HEADER.unpack_from(blob)
    if magic != MATRIX_MAGIC:
        raise DataError(f"{path}: not a MUSERMAT file")
    if version != MATRIX_VERSION:
        raise DataError(f"{path}: unsupported MUSERMAT version {version}")
    expected = _MATRIX_HEADER.size + rows * cols * 8
    if len(blob) != expected:
        raise DataError(f"{path}: payload size {len(blob) - _MATRIX_HEADER.size} does not match {rows}x{cols} header")
    data = np.frombuffer(blob, dtype="<f8", offset=_MATRIX_HEADER.size)
    return data.reshape(rows, cols).astype(np.float64)
