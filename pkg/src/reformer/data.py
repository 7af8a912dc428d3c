"""Dataset schemas, vocabulary construction, checkpoint serialization, and
the seeded synthetic toy-world generator.

File formats:
  dataset  - JSONL, one ImageRecord per line:
             {"image_id", "width", "height",
              "regions": [{"box": [x1,y1,x2,y2], "label_id", "feature": [...]}],
              "captions": [...], "triplets": [[subj, pred, obj], ...]}
  vocab    - JSON {"words": [...]} with list index = id
  checkpoint - magic "RFMR1\\n", then a 4-byte little-endian manifest
             length, then the JSON manifest {format_version, config,
             tensors: [{name, shape, byte_offset}]}, then a contiguous
             little-endian float32 payload.
"""
from __future__ import annotations

import json
import string
import struct
from dataclasses import dataclass, field

import numpy as np

from .scene_graph import (
    BoundingBox,
    ObjectVocab,
    PredicateVocab,
    SceneGraph,
    validate_graph,
)

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
SPECIAL_TOKENS = ["<pad>", "<bos>", "<eos>", "<unk>"]

CHECKPOINT_MAGIC = b"RFMR1\n"
CHECKPOINT_FORMAT_VERSION = 1

_PUNCT_TABLE = str.maketrans({ch: " " for ch in string.punctuation})


class DatasetError(ValueError):
    """Malformed dataset file or record; the message carries line context."""


class CheckpointError(ValueError):
    """Corrupt or mismatched checkpoint file."""


def normalize_words(text):
    """Lowercase, strip punctuation to spaces, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


class Vocabulary:
    """Caption word <-> id bijection with PAD/BOS/EOS/UNK pinned at 0..3."""

    def __init__(self, words):
        words = list(words)
        if words[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(words)) != len(words):
            raise ValueError("vocabulary words must be unique")
        self.words = words
        self._ids = {w: i for i, w in enumerate(words)}

    def __len__(self):
        return len(self.words)

    def id(self, word):
        return self._ids.get(word, UNK_ID)

    def word(self, idx):
        return self.words[idx]

    def __contains__(self, word):
        return word in self._ids

    def save(self, path):
        with open(path, "w") as f:
            json.dump({"words": self.words}, f)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            payload = json.load(f)
        return cls(payload["words"])


def build_vocab(captions, min_count=5):
    """Count lowercased words and keep those seen at least min_count times.

    Ids run frequency-then-lexicographic after the specials, so the result
    is deterministic and independent of corpus line order.
    """
    counts = {}
    total = 0
    for caption in captions:
        for w in normalize_words(caption):
            counts[w] = counts.get(w, 0) + 1
            total += 1
    if total == 0:
        raise DatasetError("cannot build a vocabulary from an empty corpus")
    kept = sorted(
        (w for w, c in counts.items() if c >= min_count),
        key=lambda w: (-counts[w], w),
    )
    return Vocabulary(SPECIAL_TOKENS + kept)


def tokenize(text, vocab: Vocabulary):
    """Word ids without BOS/EOS framing; out-of-vocabulary words become UNK."""
    return [vocab.id(w) for w in normalize_words(text)]


def detokenize(ids, vocab: Vocabulary):
    """Words joined by spaces; special ids are dropped."""
    return " ".join(vocab.word(i) for i in ids if i >= len(SPECIAL_TOKENS))


@dataclass
class Region:
    box: BoundingBox
    label_id: int
    feature: np.ndarray


@dataclass
class ImageRecord:
    image_id: str
    width: float
    height: float
    regions: list[Region]
    captions: list[str]
    triplets: list[tuple[int, int, int]] = field(default_factory=list)

    def graph(self) -> SceneGraph:
        return SceneGraph(
            boxes=[r.box for r in self.regions],
            labels=[r.label_id for r in self.regions],
            triplets=list(self.triplets),
            width=self.width,
            height=self.height,
        )

    def feature_matrix(self):
        return np.stack([r.feature for r in self.regions])


def _record_to_json(record: ImageRecord):
    return {
        "image_id": record.image_id,
        "width": record.width,
        "height": record.height,
        "regions": [
            {
                "box": r.box.as_list(),
                "label_id": r.label_id,
                "feature": [float(v) for v in r.feature],
            }
            for r in record.regions
        ],
        "captions": list(record.captions),
        "triplets": [list(t) for t in record.triplets],
    }


def _record_from_json(payload, where):
    try:
        regions = [
            Region(
                box=BoundingBox(*[float(v) for v in r["box"]]),
                label_id=int(r["label_id"]),
                feature=np.asarray(r["feature"], dtype=np.float64),
            )
            for r in payload["regions"]
        ]
        record = ImageRecord(
            image_id=str(payload["image_id"]),
            width=float(payload["width"]),
            height=float(payload["height"]),
            regions=regions,
            captions=[str(c) for c in payload["captions"]],
            triplets=[tuple(int(v) for v in t) for t in payload["triplets"]],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{where}: bad record: {exc}") from exc
    if not record.regions:
        raise DatasetError(f"{where}: record has no regions")
    widths = {r.feature.shape for r in record.regions}
    if len(widths) != 1 or record.regions[0].feature.ndim != 1:
        raise DatasetError(f"{where}: region feature widths are not uniform")
    for t in record.triplets:
        if len(t) != 3:
            raise DatasetError(f"{where}: triplet {t} is not [subj, pred, obj]")
    report = validate_graph(record.graph())
    if not report.ok:
        raise DatasetError(f"{where}: invalid graph: {'; '.join(report.violations)}")
    return record


def record_from_json_line(line, where="<line>"):
    """Parse and validate a single ImageRecord JSONL line."""
    try:
        payload = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{where}: malformed JSON: {exc}") from exc
    return _record_from_json(payload, where)


def save_dataset(records, path):
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(_record_to_json(record)) + "\n")


def load_dataset(path):
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{where}: malformed JSON: {exc}") from exc
            records.append(_record_from_json(payload, where))
    return records


def save_checkpoint(params, config, path):
    """Write named tensors as float32 with a JSON manifest.

    params: {dotted name: array}; config: plain JSON-serializable dict.
    Two saves of the same state are byte-identical.
    """
    names = sorted(params)
    if len(set(names)) != len(names):
        raise CheckpointError("parameter names must be unique")
    tensors = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        tensors.append(
            {"name": name, "shape": list(arr.shape), "byte_offset": offset}
        )
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config": config,
            "tensors": tensors,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns ({name: float64 array}, config dict)."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    head = len(CHECKPOINT_MAGIC)
    if len(raw) < head + 4:
        raise CheckpointError(f"{path}: truncated before manifest length")
    (manifest_len,) = struct.unpack_from("<I", raw, head)
    start = head + 4
    if len(raw) < start + manifest_len:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[start : start + manifest_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format_version {manifest.get('format_version')}"
        )
    payload = raw[start + manifest_len :]
    params = {}
    expected = 0
    for spec in manifest["tensors"]:
        shape = tuple(int(s) for s in spec["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        off = int(spec["byte_offset"])
        if off + nbytes > len(payload):
            raise CheckpointError(
                f"{path}: payload truncated at tensor {spec['name']!r}"
            )
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off)
        params[spec["name"]] = arr.astype(np.float64).reshape(shape)
        expected = max(expected, off + nbytes)
    if expected != len(payload):
        raise CheckpointError(
            f"{path}: payload length {len(payload)} does not match manifest "
            f"({expected} bytes expected)"
        )
    return params, manifest["config"]


# --- synthetic toy world ----------------------------------------------------

OBJECT_WORDS = [
    "cat", "dog", "car", "tree", "house", "ball", "bird", "boat",
    "chair", "table", "horse", "cup", "lamp", "fence", "truck", "plant",
    "kite", "bench", "sign", "rock", "sheep", "bike", "door", "flag",
]

PREDICATE_WORDS = [
    "holds", "rides", "chases", "carries", "touches", "faces",
    "follows", "guards", "pulls", "watches", "blocks", "nudges",
    "leads", "shadows", "circles", "supports",
]

ARTICLE_WORDS = ["a", "the"]


@dataclass
class SynthDataset:
    records: list[ImageRecord]
    object_vocab: ObjectVocab
    predicate_vocab: PredicateVocab


def _class_names(count, pool, fallback):
    if count <= len(pool):
        return pool[:count]
    return pool + [f"{fallback}{i}" for i in range(count - len(pool))]


def synth_generate(
    seed,
    n_images,
    n_object_classes,
    n_predicates,
    regions_per_image=(3, 6),
    d_vis=64,
    image_size=(256.0, 256.0),
):
    """Deterministic toy dataset: a pure function of its arguments.

    Visual features are per-class prototype vectors plus seeded Gaussian
    noise (sigma 0.1). Foreground predicates are a function of the label
    pair and of which region sits higher in the image, so the relation
    task is learnable from labels plus geometry. Captions verbalize the
    triplet whose subject box is largest (a deterministic cross-region
    selection the caption side must learn on top of the relation task):
    "a <subj> <pred> a <obj>" plus a variant with "the", so caption words
    stay inside articles + object names + predicate names.
    """
    lo, hi = regions_per_image
    if not (1 <= lo <= hi):
        raise ValueError(f"impossible region range {regions_per_image}")
    if n_predicates < 1:
        raise ValueError("need at least one foreground predicate")
    rng = np.random.default_rng(seed)
    obj_names = _class_names(n_object_classes, OBJECT_WORDS, "thing")
    pred_names = _class_names(n_predicates, PREDICATE_WORDS, "links")
    prototypes = rng.normal(0.0, 1.0, size=(n_object_classes, d_vis))
    # (subject class, object class) -> (predicate if subject higher, else)
    compat = rng.integers(1, n_predicates + 1, size=(n_object_classes, n_object_classes, 2))
    img_w, img_h = image_size
    records = []
    for idx in range(n_images):
        n = int(rng.integers(lo, hi + 1))
        boxes = []
        for _ in range(n):
            w = rng.uniform(0.1, 0.35) * img_w
            h = rng.uniform(0.1, 0.35) * img_h
            x1 = rng.uniform(0, img_w - w)
            y1 = rng.uniform(0, img_h - h)
            boxes.append(
                BoundingBox(
                    round(x1, 2), round(y1, 2), round(x1 + w, 2), round(y1 + h, 2)
                )
            )
        labels = [int(v) for v in rng.integers(0, n_object_classes, size=n)]
        features = [
            np.round(prototypes[lab] + rng.normal(0.0, 0.1, size=d_vis), 5)
            for lab in labels
        ]
        triplets = []
        if n >= 2:
            wanted = int(rng.integers(1, 4))
            pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
            order = rng.permutation(len(pairs))
            for k in order[: min(wanted, len(pairs))]:
                i, j = pairs[k]
                above = boxes[i].center[1] < boxes[j].center[1]
                pred = int(compat[labels[i], labels[j], 0 if above else 1])
                triplets.append((i, pred, j))
        if triplets:
            s, p, o = max(triplets, key=lambda t: boxes[t[0]].area)
            subj, pred, obj = obj_names[labels[s]], pred_names[p - 1], obj_names[labels[o]]
            captions = [
                f"a {subj} {pred} a {obj}",
                f"the {subj} {pred} the {obj}",
            ]
        else:
            subj = obj_names[labels[0]]
            captions = [f"a {subj}", f"the {subj}"]
        records.append(
            ImageRecord(
                image_id=f"synth-{seed}-{idx:04d}",
                width=img_w,
                height=img_h,
                regions=[
                    Region(box=b, label_id=lab, feature=f)
                    for b, lab, f in zip(boxes, labels, features)
                ],
                captions=captions,
                triplets=triplets,
            )
        )
    return SynthDataset(
        records=records,
        object_vocab=ObjectVocab(obj_names),
        predicate_vocab=PredicateVocab.from_foreground(pred_names),
    )


def load_word_vectors(path):
    """Text word-vector file: one 'word v1 v2 ...' line per word."""
    vectors = {}
    with open(path) as f:
        for line in f:
            parts = line.split()
            if len(parts) < 2:
                continue
            vectors[parts[0]] = np.asarray([float(v) for v in parts[1:]])
    return vectors


def word_vectors_for_vocab(vectors, vocab: Vocabulary):
    """{vocab id: vector} for the words present in the file."""
    return {
        idx: vectors[word]
        for idx, word in enumerate(vocab.words)
        if word in vectors
    }
