"""On-disk dataset formats and the synthetic captioning corpus.

A dataset directory holds three files:

``manifest.json``
    ``{"version": 1, "vocabulary": "vocab.json", "tensors": "features.hmnt",
    "videos": [{"id", "context", "motion", "objects", "captions": [{"tokens",
    "entities", "predicate"}]}]}`` where the three feature fields are tensor
    keys, ``entities`` are token indices and ``predicate`` is ``[start, end)``.
``vocab.json``
    A JSON list of words, starting with the special markers.
``features.hmnt``
    Framed float32 tensors keyed by string (see :func:`write_tensor_store`).
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import CaptionTarget, VideoFeatures
from .language import Vocabulary, ToyEmbedder, extract_supervision

log = logging.getLogger(__name__)

STORE_MAGIC = b"HMNT"
STORE_VERSION = 1
MANIFEST_VERSION = 1
MANIFEST_FILE = "manifest.json"
VOCAB_FILE = "vocab.json"
STORE_FILE = "features.hmnt"


class DataFormatError(ValueError):
    """A dataset file is malformed; the message names the offending key or record."""


# ---------------------------------------------------------------------------
# tensor store
# ---------------------------------------------------------------------------

def write_tensor_store(path, tensors: dict[str, np.ndarray]) -> None:
    """Write ``"HMNT"``, u32 version, u32 count, then per entry: u16 key length,
    UTF-8 key, u8 rank, u32 extents, float32 data (all little-endian)."""
    chunks = [STORE_MAGIC, struct.pack("<II", STORE_VERSION, len(tensors))]
    for key, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        kb = key.encode("utf-8")
        chunks.append(struct.pack("<H", len(kb)))
        chunks.append(kb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensor_store(path) -> dict[str, np.ndarray]:
    """Read a tensor store; values are promoted to float64."""
    buf = Path(path).read_bytes()
    if buf[:4] != STORE_MAGIC:
        raise DataFormatError(f"{path}: bad magic {buf[:4]!r}, expected {STORE_MAGIC!r}")
    if len(buf) < 12:
        raise DataFormatError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != STORE_VERSION:
        raise DataFormatError(f"{path}: unsupported tensor store version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for n in range(count):
        try:
            (klen,) = struct.unpack_from("<H", buf, pos)
            key = buf[pos + 2 : pos + 2 + klen].decode("utf-8")
            pos += 2 + klen
            (rank,) = struct.unpack_from("<B", buf, pos)
            shape = struct.unpack_from(f"<{rank}I", buf, pos + 1)
            pos += 1 + 4 * rank
        except (struct.error, UnicodeDecodeError):
            raise DataFormatError(f"{path}: truncated header of entry {n}") from None
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise DataFormatError(
                f"{path}: tensor {key!r} declares shape {tuple(shape)} but the frame is truncated"
            )
        if key in out:
            raise DataFormatError(f"{path}: duplicate tensor key {key!r}")
        out[key] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(buf):
        raise DataFormatError(f"{path}: {len(buf) - pos} trailing bytes after the last tensor")
    return out


# ---------------------------------------------------------------------------
# in-memory dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CaptionRecord:
    tokens: tuple
    entities: tuple
    predicate: tuple

    def truncated(self, max_words: int) -> "CaptionRecord":
        if len(self.tokens) <= max_words:
            return self
        start, end = self.predicate
        end = min(end, max_words)
        if start >= end:
            raise DataFormatError(f"predicate span {self.predicate} lost by truncation at {max_words}")
        return CaptionRecord(
            self.tokens[:max_words],
            tuple(i for i in self.entities if i < max_words),
            (start, end),
        )


@dataclass
class VideoRecord:
    id: str
    features: VideoFeatures
    captions: list


@dataclass
class Dataset:
    videos: list
    vocab: Vocabulary
    _targets: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.videos)

    def caption_ids(self) -> list[list[int]]:
        return [self.vocab.encode(c.tokens) for v in self.videos for c in v.captions]

    def targets(self, embedder: ToyEmbedder, n_slots: int, max_words: int = 20) -> list[list[CaptionTarget]]:
        """Supervision for every caption of every video (cached per settings)."""
        key = (embedder, n_slots, max_words)
        if key not in self._targets:
            self._targets[key] = [
                [caption_target(c.truncated(max_words), self.vocab, embedder, n_slots) for c in v.captions]
                for v in self.videos
            ]
        return self._targets[key]


def caption_target(record: CaptionRecord, vocab: Vocabulary, embedder: ToyEmbedder, n_slots: int) -> CaptionTarget:
    entities, p, s = extract_supervision(record.tokens, record.entities, record.predicate, embedder, n_slots)
    return CaptionTarget(
        tokens=tuple(vocab.encode(record.tokens)),
        entities=entities,
        predicate=p,
        sentence=s,
        entity_words=tuple(record.tokens[i] for i in record.entities),
    )


# ---------------------------------------------------------------------------
# manifest I/O
# ---------------------------------------------------------------------------

def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def save_dataset(path, dataset: Dataset) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, np.ndarray] = {}
    videos = []
    for v in dataset.videos:
        keys = {name: f"{v.id}/{name}" for name in ("context", "motion", "objects")}
        for name, key in keys.items():
            tensors[key] = getattr(v.features, name)
        videos.append({
            "id": v.id,
            **keys,
            "captions": [
                {"tokens": list(c.tokens), "entities": list(c.entities), "predicate": list(c.predicate)}
                for c in v.captions
            ],
        })
    write_tensor_store(root / STORE_FILE, tensors)
    _dump_json(root / VOCAB_FILE, dataset.vocab.words)
    _dump_json(root / MANIFEST_FILE, {
        "version": MANIFEST_VERSION,
        "vocabulary": VOCAB_FILE,
        "tensors": STORE_FILE,
        "videos": videos,
    })


def load_dataset(path, embedder: ToyEmbedder | None = None, n_slots: int | None = None) -> Dataset:
    """Load a dataset directory.  With ``embedder`` and ``n_slots`` the caption
    supervision is materialised immediately."""
    root = Path(path)
    try:
        manifest = json.loads((root / MANIFEST_FILE).read_text())
    except FileNotFoundError:
        raise DataFormatError(f"{root}: no {MANIFEST_FILE}") from None
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataFormatError(f"{root}: unsupported manifest version {manifest.get('version')!r}")
    vocab = Vocabulary.from_list(json.loads((root / manifest["vocabulary"]).read_text()))
    store = read_tensor_store(root / manifest["tensors"])
    videos = []
    for rec in manifest["videos"]:
        vid = rec.get("id")
        arrays = {}
        for name in ("context", "motion", "objects"):
            key = rec[name]
            if key not in store:
                raise DataFormatError(f"video {vid!r}: tensor key {key!r} not in the tensor store")
            arrays[name] = store[key]
        try:
            features = VideoFeatures(**arrays)
        except ValueError as exc:
            raise DataFormatError(f"video {vid!r}: {exc}") from None
        captions = []
        for j, c in enumerate(rec["captions"]):
            tokens = tuple(c["tokens"])
            start, end = c["predicate"]
            if not 0 <= start < end <= len(tokens):
                raise DataFormatError(f"video {vid!r} caption {j}: predicate span {c['predicate']} out of bounds")
            if any(not 0 <= i < len(tokens) for i in c["entities"]):
                raise DataFormatError(f"video {vid!r} caption {j}: entity index out of bounds")
            missing = [t for t in tokens if t not in vocab]
            if missing:
                raise DataFormatError(f"video {vid!r} caption {j}: tokens {missing} not in vocabulary")
            captions.append(CaptionRecord(tokens, tuple(c["entities"]), (start, end)))
        if not captions:
            raise DataFormatError(f"video {vid!r}: no captions")
        videos.append(VideoRecord(vid, features, captions))
    ds = Dataset(videos, vocab)
    if embedder is not None and n_slots is not None:
        ds.targets(embedder, n_slots)
    return ds


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

ENTITY_WORDS = ("man", "woman", "child", "dog", "cat", "horse",
                "bird", "ball", "car", "boat", "guitar", "piano")
VERB_WORDS = ("chases", "holds", "rides", "watches", "pushes", "kicks", "follows", "plays")


@dataclass(frozen=True)
class SyntheticGrammar:
    """Captions ``a <entity> <verb> a <entity>`` with latent feature vectors per word.

    Context rows are noisy copies of the subject's latent vector and motion
    rows of the verb plus the object entity.  Each video has two signal
    objects (the two caption entities) among distractors drawn from the
    remaining entity words.
    """

    entities: tuple = ENTITY_WORDS
    verbs: tuple = VERB_WORDS
    feature_dim: int = 32
    T: int = 15
    n_objects: int = 10
    n_signal: int = 2
    noise: float = 0.1

    def latents(self, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng([seed, 0])
        words = list(self.entities) + list(self.verbs)
        return {w: rng.standard_normal(self.feature_dim) for w in words}

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(["a", *self.entities, *self.verbs])

    def video(self, seed: int, index: int, latents: dict) -> tuple[VideoFeatures, CaptionRecord]:
        rng = np.random.default_rng([seed, 1, index])
        subj, obj = rng.choice(len(self.entities), size=2, replace=False)
        verb = self.verbs[rng.integers(len(self.verbs))]
        subj, obj = self.entities[subj], self.entities[obj]
        sigma = self.noise
        d = self.feature_dim
        context = latents[subj] + sigma * rng.standard_normal((self.T, d))
        motion = latents[verb] + latents[obj] + sigma * rng.standard_normal((self.T, d))
        others = [w for w in self.entities if w not in (subj, obj)]
        n_distract = self.n_objects - self.n_signal
        distractors = list(rng.choice(others, size=n_distract, replace=False))
        words = [subj, obj] + distractors
        rows = np.stack([latents[w] for w in words]) + sigma * rng.standard_normal((self.n_objects, d))
        objects = rows[rng.permutation(self.n_objects)]
        tokens = ("a", subj, verb, "a", obj)
        caption = CaptionRecord(tokens, (1, 4), (2, 5))
        return VideoFeatures(context, motion, objects), caption


def synth_generate(seed: int, n_videos: int, grammar: SyntheticGrammar | None = None, out=None) -> Dataset:
    """Build the synthetic corpus; with ``out`` it is also written to disk."""
    if n_videos < 1:
        raise ValueError("n_videos must be at least 1")
    grammar = grammar or SyntheticGrammar()
    latents = grammar.latents(seed)
    videos = []
    for i in range(n_videos):
        features, caption = grammar.video(seed, i, latents)
        # stored as float32 on disk; keep memory identical to what a reload sees
        features = VideoFeatures(
            *(np.asarray(a, dtype=np.float32).astype(np.float64)
              for a in (features.context, features.motion, features.objects))
        )
        videos.append(VideoRecord(f"video{i:05d}", features, [caption]))
    ds = Dataset(videos, grammar.vocabulary())
    if out is not None:
        save_dataset(out, ds)
    return ds


def entity_vocabulary(words: Sequence[str], embedder: ToyEmbedder) -> tuple[list[str], np.ndarray]:
    return list(words), np.stack([embedder.word_vector(w) for w in words])
