"""Feature files, manifests, padding and the planted-XOR synthetic task.

Feature matrix file (``.mmf``), all integers little-endian::

    b"MMF1" | rows: u32 | cols: u32 | rows*cols float32, row-major

A manifest is JSON Lines, one self-describing record per sample::

    {"version": 1, "id": "s0", "split": "train",
     "text": "f/s0_text.mmf", "audio": ..., "video": ..., "question": ...,
     "candidates": [{"answer": "f/s0_ans0.mmf", "label": 1}, ...]}

Relative paths resolve against the manifest's directory.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MMF1"
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")
_HEADER = struct.Struct("<4sII")
_MAX_ENTRIES = 1 << 31


class FeatureFormatError(ValueError):
    """Malformed feature matrix file."""


class BadMagicError(FeatureFormatError):
    pass


class TruncatedFileError(FeatureFormatError):
    pass


class SizeOverflowError(FeatureFormatError):
    pass


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------- feature files


def encode_feature_matrix(matrix) -> bytes:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {m.shape}")
    rows, cols = m.shape
    if rows < 1 or cols < 1:
        raise ValueError(f"feature matrix needs rows, cols >= 1, got {m.shape}")
    if rows > 0xFFFFFFFF or cols > 0xFFFFFFFF or rows * cols >= _MAX_ENTRIES:
        raise SizeOverflowError(f"feature matrix {m.shape} is too large for the format")
    return _HEADER.pack(MAGIC, rows, cols) + m.astype("<f4").tobytes(order="C")


def decode_feature_matrix(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise TruncatedFileError(f"{source}: {len(buf)} bytes is shorter than the 12-byte header")
    magic, rows, cols = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"{source}: unsupported format version/magic {magic!r}, expected {MAGIC!r}")
    if rows < 1 or cols < 1:
        raise FeatureFormatError(f"{source}: empty matrix {rows}x{cols}")
    if rows * cols >= _MAX_ENTRIES:
        raise SizeOverflowError(f"{source}: {rows}x{cols} entries exceed the format limit")
    want = _HEADER.size + 4 * rows * cols
    if len(buf) < want:
        raise TruncatedFileError(f"{source}: payload has {len(buf) - _HEADER.size} bytes, expected {want - _HEADER.size}")
    if len(buf) > want:
        raise FeatureFormatError(f"{source}: {len(buf) - want} trailing bytes after payload")
    return np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=_HEADER.size).reshape(rows, cols).copy()


def write_feature_matrix(path, matrix) -> None:
    Path(path).write_bytes(encode_feature_matrix(matrix))


def read_feature_matrix(path) -> np.ndarray:
    """Read an ``.mmf`` file as float32 (widen with ``astype(np.float64)``, which is exact)."""
    path = Path(path)
    return decode_feature_matrix(path.read_bytes(), str(path))


# ---------------------------------------------------------------- manifests


@dataclass
class Candidate:
    answer: str
    label: int


@dataclass
class SampleRecord:
    id: str
    split: str
    text: str
    audio: str
    video: str
    question: str
    candidates: list[Candidate]


@dataclass
class Manifest:
    root: Path
    records: list[SampleRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def ids(self, split: str | None = None) -> list[str]:
        return [r.id for r in self.records if split is None or r.split == split]

    def get(self, sample_id: str) -> SampleRecord:
        for r in self.records:
            if r.id == sample_id:
                return r
        raise KeyError(f"no sample {sample_id!r} in manifest")

    @property
    def n_candidates(self) -> int | None:
        return len(self.records[0].candidates) if self.records else None

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p


def record_to_json(rec: SampleRecord) -> str:
    obj = {
        "version": MANIFEST_VERSION,
        "id": rec.id,
        "split": rec.split,
        "text": rec.text,
        "audio": rec.audio,
        "video": rec.video,
        "question": rec.question,
        "candidates": [{"answer": c.answer, "label": c.label} for c in rec.candidates],
    }
    return json.dumps(obj, sort_keys=True)


def write_manifest(path, records: list[SampleRecord]) -> None:
    Path(path).write_text("".join(record_to_json(r) + "\n" for r in records))


def _parse_record(obj, lineno: int) -> SampleRecord:
    sid = obj.get("id", f"<line {lineno}>") if isinstance(obj, dict) else f"<line {lineno}>"
    if not isinstance(obj, dict):
        raise ManifestError(f"line {lineno}: record is not an object")
    if obj.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"sample {sid}: unsupported manifest version {obj.get('version')!r}")
    try:
        cands = [Candidate(str(c["answer"]), int(c["label"])) for c in obj["candidates"]]
        rec = SampleRecord(str(obj["id"]), str(obj["split"]), str(obj["text"]), str(obj["audio"]),
                           str(obj["video"]), str(obj["question"]), cands)
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"sample {sid}: malformed record ({exc})") from None
    if rec.split not in SPLITS:
        raise ManifestError(f"sample {sid}: unknown split {rec.split!r}")
    labels = [c.label for c in cands]
    if any(lab not in (0, 1) for lab in labels):
        raise ManifestError(f"sample {sid}: labels must be 0 or 1")
    if sum(labels) != 1:
        raise ManifestError(f"sample {sid}: expected exactly one correct candidate, found {sum(labels)}")
    if len(cands) not in (2, 4):
        raise ManifestError(f"sample {sid}: candidate count must be 2 or 4, got {len(cands)}")
    return rec


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest {path} not found")
    man = Manifest(root=path.parent)
    seen = set()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {lineno}: not valid JSON ({exc})") from None
        rec = _parse_record(obj, lineno)
        if rec.id in seen:
            raise ManifestError(f"sample {rec.id}: duplicate id")
        seen.add(rec.id)
        if man.records and len(rec.candidates) != len(man.records[0].candidates):
            raise ManifestError(
                f"sample {rec.id}: has {len(rec.candidates)} candidates, manifest uses "
                f"{len(man.records[0].candidates)}")
        man.records.append(rec)
    return man


# ---------------------------------------------------------------- samples


@dataclass
class Sample:
    id: str
    text: np.ndarray
    audio: np.ndarray
    video: np.ndarray
    question: np.ndarray
    candidates: list[np.ndarray]
    labels: list[int]

    @property
    def lengths(self) -> dict[str, object]:
        return {
            "text": len(self.text), "audio": len(self.audio), "video": len(self.video),
            "question": len(self.question), "candidates": [len(c) for c in self.candidates],
        }


def load_sample(manifest: Manifest, sample_id: str, config) -> Sample:
    """Read and validate one sample; ``config`` supplies the expected feature widths."""
    rec = manifest.get(sample_id)

    def read(rel, what, width):
        p = manifest.resolve(rel)
        if not p.exists():
            raise FileNotFoundError(f"sample {sample_id}: {what} file {p} not found")
        try:
            m = read_feature_matrix(p).astype(np.float64)
        except FeatureFormatError as exc:
            raise FeatureFormatError(f"sample {sample_id}: {exc}") from None
        if m.shape[1] != width:
            raise ManifestError(f"sample {sample_id}: {what} width {m.shape[1]} != expected {width}")
        return m

    return Sample(
        id=rec.id,
        text=read(rec.text, "text", config.d_text),
        audio=read(rec.audio, "audio", config.d_audio),
        video=read(rec.video, "video", config.d_video),
        question=read(rec.question, "question", config.d_query),
        candidates=[read(c.answer, f"answer {k}", config.d_query) for k, c in enumerate(rec.candidates)],
        labels=[c.label for c in rec.candidates],
    )


def load_split(manifest: Manifest, split: str | None, config) -> list[Sample]:
    return [load_sample(manifest, sid, config) for sid in manifest.ids(split)]


def pad_or_truncate(matrix, length: int) -> tuple[np.ndarray, int]:
    """Zero-pad or cut (keeping the prefix) to ``length`` rows; returns (matrix, valid_len)."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1:
        raise ValueError(f"pad_or_truncate needs a T×d matrix with T >= 1, got {m.shape}")
    valid = min(m.shape[0], length)
    out = np.zeros((length, m.shape[1]))
    out[:valid] = m[:valid]
    return out, valid


@dataclass
class Batch:
    """Samples stacked to a common length; answers are flattened to one row per candidate."""

    ids: list[str]
    text: np.ndarray
    audio: np.ndarray
    video: np.ndarray
    question: np.ndarray
    answers: np.ndarray  # (B*K, L, d_query)
    lengths: dict[str, np.ndarray]  # per stream valid lengths; "answers" is per candidate
    labels: np.ndarray  # (B*K,)
    n_candidates: int

    def __len__(self):
        return len(self.ids)

    @property
    def owner(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.ids)), self.n_candidates)

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx, dtype=np.intp)
        k = self.n_candidates
        cand = (idx[:, None] * k + np.arange(k)).reshape(-1)
        lengths = {n: (v[cand] if n == "answers" else v[idx]) for n, v in self.lengths.items()}
        return Batch([self.ids[i] for i in idx], self.text[idx], self.audio[idx], self.video[idx],
                     self.question[idx], self.answers[cand], lengths, self.labels[cand], k)


def collate(samples: list[Sample], length: int) -> Batch:
    if not samples:
        raise ValueError("cannot collate an empty sample list")
    k = len(samples[0].candidates)
    if any(len(s.candidates) != k for s in samples):
        raise ValueError("all samples in a batch need the same candidate count")

    def stack(mats):
        padded = [pad_or_truncate(m, length) for m in mats]
        return np.stack([p[0] for p in padded]), np.array([p[1] for p in padded])

    text, lt = stack([s.text for s in samples])
    audio, la = stack([s.audio for s in samples])
    video, lv = stack([s.video for s in samples])
    question, lq = stack([s.question for s in samples])
    answers, lc = stack([c for s in samples for c in s.candidates])
    labels = np.array([lab for s in samples for lab in s.labels], dtype=np.float64)
    return Batch([s.id for s in samples], text, audio, video, question, answers,
                 {"text": lt, "audio": la, "video": lv, "question": lq, "answers": lc}, labels, k)


# ---------------------------------------------------------------- synthetic task


@dataclass
class SynthConfig:
    seed: int = 0
    n_train: int = 2000
    n_val: int = 0
    n_test: int = 500
    seq_len: int = 8
    question_len: int = 8
    answer_len: int = 8
    d_text: int = 8
    d_audio: int = 4
    d_video: int = 8
    noise: float = 0.1
    magnitude: float = 1.0
    n_candidates: int = 2

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise scale must be >= 0")
        if min(self.d_text, self.d_audio, self.d_video) < 2:
            raise ValueError("feature widths must be >= 2")
        if self.n_candidates not in (2, 4):
            raise ValueError("n_candidates must be 2 or 4")


# coordinate that carries the planted bit in every stream
SIGNAL_COORD = 0


@dataclass
class SynthTruth:
    """Planted values of one generated sample (for oracles and tests)."""

    id: str
    a: int
    b: int
    text_pos: int
    video_pos: int
    correct: int


def _signed(bit: int, magnitude: float) -> float:
    return magnitude if bit else -magnitude


def generate_synthetic(cfg: SynthConfig, out_dir) -> tuple[Path, list[SynthTruth]]:
    """Write the planted cross-modal XOR task under ``out_dir``; returns the manifest path.

    Text carries bit ``a`` and video bit ``b`` as a signed spike at one random
    timestep; audio is noise; the question is constant; the correct answer
    carries ``a xor b`` on every row and the distractors carry its complement.
    """
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    records, truths = [], []
    plan = [("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)]
    for split, count in plan:
        for n in range(count):
            sid = f"{split}{n:05d}"
            a, b = (int(v) for v in rng.integers(0, 2, size=2))
            tpos, vpos = (int(v) for v in rng.integers(0, cfg.seq_len, size=2))
            correct = int(rng.integers(0, cfg.n_candidates))
            text = rng.normal(0.0, cfg.noise, size=(cfg.seq_len, cfg.d_text))
            text[tpos, SIGNAL_COORD] += _signed(a, cfg.magnitude)
            audio = rng.normal(0.0, cfg.noise, size=(cfg.seq_len, cfg.d_audio))
            video = rng.normal(0.0, cfg.noise, size=(cfg.seq_len, cfg.d_video))
            video[vpos, SIGNAL_COORD] += _signed(b, cfg.magnitude)
            question = cfg.magnitude + rng.normal(0.0, cfg.noise, size=(cfg.question_len, cfg.d_text))
            answers = []
            for k in range(cfg.n_candidates):
                bit = (a ^ b) if k == correct else 1 - (a ^ b)
                ans = rng.normal(0.0, cfg.noise, size=(cfg.answer_len, cfg.d_text))
                ans[:, SIGNAL_COORD] += _signed(bit, cfg.magnitude)
                answers.append(ans)

            paths = {}
            for name, mat in (("text", text), ("audio", audio), ("video", video), ("question", question)):
                rel = f"features/{sid}_{name}.mmf"
                write_feature_matrix(out_dir / rel, mat)
                paths[name] = rel
            cands = []
            for k, ans in enumerate(answers):
                rel = f"features/{sid}_ans{k}.mmf"
                write_feature_matrix(out_dir / rel, ans)
                cands.append(Candidate(rel, int(k == correct)))
            records.append(SampleRecord(sid, split, paths["text"], paths["audio"], paths["video"],
                                        paths["question"], cands))
            truths.append(SynthTruth(sid, a, b, tpos, vpos, correct))
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(manifest_path, records)
    return manifest_path, truths
