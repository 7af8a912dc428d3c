"""The ReFormer assembly: region embedding, one shared encoder, a relation
head and an object head on the graph side, a caption decoder on the
language side, and the combined objective total = caption + lambda * relation.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import BOS_ID, EOS_ID, PAD_ID
from .layers import (
    DecoderLayer,
    Embedding,
    EncoderLayer,
    Linear,
    Module,
    Norm,
    positional_encoding,
)
from .scene_graph import (
    BACKGROUND_PREDICATE,
    PAIR_GEOMETRY_DIM,
    SceneGraph,
    TripletPrediction,
    box_base_features,
    enumerate_pairs,
    pair_geometry,
)


@dataclass
class ReFormerConfig:
    """Every knob of the model and its training schedule.

    Defaults follow the published ReFormer recipe where it states a value
    (d=512, h=8, 3+3 layers, d_b=100, d_l=300, d_h=512, 2048-d region
    features, lambda=0.1, 10K warmup, SCST lr 5e-6). dropout is the drop
    probability; the published recipe lists 0.9, which is unusually high
    for a drop rate and may denote a keep rate, so the workable 0.1 is the
    default here and 0.9 remains expressible.
    """

    d: int = 512
    h: int = 8
    n_enc: int = 3
    n_dec: int = 3
    d_b: int = 100
    d_l: int = 300
    d_h: int = 512
    d_vis: int = 2048
    lambda_: float = 0.1
    dropout: float = 0.1
    ffn_mult: int = 4
    n_object_classes: int = 1600
    n_predicates: int = 51  # foreground classes plus background at id 0
    caption_vocab_size: int = 10201
    max_caption_len: int = 20
    freeze_encoder_in_caption: bool = False  # the ReFormer* ablation
    use_relation_loss: bool = True  # off = the "- relation loss" ablation
    weighted_relation_loss: bool = True  # off = the "- weighted" ablation
    include_object_loss: bool = True
    background_pair_sample_ratio: float = 3.0
    scst_keep_relation_loss: bool = True
    warmup_steps: int = 10000
    scst_lr: float = 5e-6
    train_stage: str = "init"  # init -> sgg -> caption -> scst
    caption_words: list[str] | None = None
    object_names: list[str] | None = None
    predicate_names: list[str] | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.d % self.h != 0:
            raise ValueError(f"d={self.d} must be divisible by h={self.h}")
        if self.lambda_ < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lambda_}")
        if self.n_enc < 1 or self.n_dec < 1:
            raise ValueError("layer counts must be >= 1")
        for name in ("d", "d_b", "d_l", "d_h", "d_vis", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_predicates < 2:
            raise ValueError("need at least one foreground predicate plus background")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.background_pair_sample_ratio < 0:
            raise ValueError("background_pair_sample_ratio must be >= 0")

    def to_dict(self):
        out = {}
        for f in fields(self):
            key = "lambda" if f.name == "lambda_" else f.name
            out[key] = getattr(self, f.name)
        return out

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in d.items():
            name = "lambda_" if key == "lambda" else key
            if name not in known:
                raise ValueError(f"unknown config field {key!r}")
            kwargs[name] = value
        return cls(**kwargs)


@dataclass
class EncoderOutput:
    """Per-region contextual features plus the region keep-mask."""

    features: T.Tensor  # (n, d)
    pad_mask: np.ndarray | None = None

    @property
    def num_regions(self):
        return self.features.shape[0]


@dataclass
class LossBreakdown:
    total: T.Tensor
    caption: T.Tensor | None = None
    relation: T.Tensor | None = None
    object_term: T.Tensor | None = None
    relation_had_no_pairs: bool = False

    def floats(self):
        def val(t):
            return float(t.data) if t is not None else 0.0

        return {
            "loss_total": val(self.total),
            "loss_caption": val(self.caption),
            "loss_relation": val(self.relation),
        }


@dataclass
class RelationLossResult:
    """Relation objective value and its sub-terms."""

    loss: T.Tensor
    predicate_term: T.Tensor | None = None
    object_term: T.Tensor | None = None
    no_pairs: bool = False


@dataclass
class CaptionResult:
    """Generated token ids (specials stripped), with bookkeeping."""

    ids: list[int]
    logprob: float
    truncated: bool = False
    token_logprobs: list[float] = field(default_factory=list)


class ReFormer(Module):
    def __init__(self, config: ReFormerConfig, seed=0, word_vectors=None):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        re = self.add_child("region_embed", Module())
        self.visual_proj = re.add_child("visual_proj", Linear(c.d_vis, c.d, rng))
        self.box_encoder = re.add_child("box_encoder", Linear(6, c.d_b, rng))
        # one extra row embeds the unknown-label fallback
        self.label_embed = re.add_child(
            "label_embed", Embedding(c.n_object_classes + 1, c.d_l, rng)
        )
        self.fuse = re.add_child("fuse", Linear(c.d + c.d_b + c.d_l, c.d_h, rng))
        self.region_out = (
            re.add_child("out_proj", Linear(c.d_h, c.d, rng)) if c.d_h != c.d else None
        )

        enc = self.add_child("encoder", Module())
        self.encoder_layers = [
            enc.add_child(f"layers.{i}", EncoderLayer(c.d, c.h, c.ffn_mult, c.dropout, rng))
            for i in range(c.n_enc)
        ]
        self.encoder_norm = enc.add_child("final_norm", Norm(c.d))

        self.object_head = self.add_child("object_head", Linear(c.d, c.n_object_classes, rng))
        rel = self.add_child("relation_head", Module())
        self.rel_fc1 = rel.add_child(
            "fc1", Linear(2 * c.d + PAIR_GEOMETRY_DIM, c.d, rng)
        )
        self.rel_fc2 = rel.add_child("fc2", Linear(c.d, c.n_predicates, rng))

        dec = self.add_child("decoder", Module())
        self.token_embed = dec.add_child(
            "token_embed", Embedding(c.caption_vocab_size, c.d, rng)
        )
        if word_vectors is not None:
            self._init_word_embedding(word_vectors)
        self.decoder_layers = [
            dec.add_child(f"layers.{i}", DecoderLayer(c.d, c.h, c.ffn_mult, c.dropout, rng))
            for i in range(c.n_dec)
        ]
        self.decoder_norm = dec.add_child("final_norm", Norm(c.d))
        self.out_proj = dec.add_child("out_proj", Linear(c.d, c.caption_vocab_size, rng))
        # generation re-runs the prefix each step, so cache generously
        self._pos_table = positional_encoding(max(c.max_caption_len + 2, 64), c.d)

    def _init_word_embedding(self, word_vectors):
        """Overlay pretrained rows onto the token embedding (by vocab id)."""
        table = self.token_embed.table.data.copy()
        for idx, vec in word_vectors.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (self.config.d,):
                raise ValueError(
                    f"word vector width {vec.shape} does not match d={self.config.d}"
                )
            if 0 <= idx < table.shape[0]:
                table[idx] = vec
        self.token_embed.table.data = table

    # --- scene-graph side -------------------------------------------------

    def embed_regions(self, tape, features, boxes, labels, img_w, img_h):
        """Fuse visual features, box encoding, and label embedding per region.

        labels=None uses the unknown-label row for every region. No
        positional signal is added: regions are a set, geometry enters via
        the box channel.
        """
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.config.d_vis:
            raise ValueError(
                f"expected region features (n, {self.config.d_vis}), got {feats.shape}"
            )
        if not np.isfinite(feats).all():
            raise ValueError("region features contain NaN or infinity")
        n = feats.shape[0]
        if n < 1:
            raise ValueError("need at least one region")
        if labels is None:
            ids = np.full(n, self.config.n_object_classes, dtype=np.int64)
        else:
            ids = np.asarray(labels, dtype=np.int64)
            if ids.shape != (n,):
                raise ValueError(f"{ids.shape} labels for {n} regions")
            if ids.size and (ids.min() < 0 or ids.max() >= self.config.n_object_classes):
                raise IndexError(
                    f"object label out of range [0, {self.config.n_object_classes})"
                )
        vis = self.visual_proj.forward(tape, T.Tensor(feats))
        base = np.array(
            [box_base_features(b, img_w, img_h) for b in boxes], dtype=np.float64
        )
        if base.shape[0] != n:
            raise ValueError(f"{base.shape[0]} boxes for {n} feature rows")
        box = self.box_encoder.forward(tape, T.Tensor(base))
        lab = self.label_embed.forward(tape, ids)
        tokens = self.fuse.forward(tape, T.concat([vis, box, lab], axis=1))
        if self.region_out is not None:
            tokens = self.region_out.forward(tape, tokens)
        return tokens

    def encode(self, tape, tokens, pad_mask=None, rng=None, training=False):
        x = tokens
        for layer in self.encoder_layers:
            x = layer.forward(tape, x, pad_mask, rng=rng, training=training)
        return EncoderOutput(self.encoder_norm.forward(tape, x), pad_mask)

    def object_logits(self, tape, enc: EncoderOutput):
        return self.object_head.forward(tape, enc.features)

    def relation_logits(self, tape, enc: EncoderOutput, pairs, boxes, img_w, img_h):
        """Logits over all predicate classes (background included) per pair."""
        if not pairs:
            return T.Tensor(np.zeros((0, self.config.n_predicates)))
        n = enc.num_regions
        for i, j in pairs:
            if not (0 <= i < n and 0 <= j < n):
                raise IndexError(f"pair ({i}, {j}) out of range for {n} regions")
        subj = T.gather_rows(enc.features, [i for i, _ in pairs])
        obj = T.gather_rows(enc.features, [j for _, j in pairs])
        geo = np.array(
            [pair_geometry(boxes[i], boxes[j], img_w, img_h) for i, j in pairs]
        )
        x = T.concat([subj, obj, T.Tensor(geo)], axis=1)
        return self.rel_fc2.forward(tape, T.gelu(self.rel_fc1.forward(tape, x)))

    def relation_loss(
        self, tape, pair_logits, pairs, graph: SceneGraph, rng,
        object_logits=None, class_weights=None,
    ) -> RelationLossResult:
        """Predicate cross-entropy over foreground pairs plus a seeded
        background subsample, plus the object-head term at coefficient 1.

        With fewer than two regions there are no pairs: the predicate term
        is zero and no_pairs is flagged, while the object term still counts.
        """
        c = self.config
        gt = graph.pair_to_predicate()
        targets = np.array(
            [gt.get(p, BACKGROUND_PREDICATE) for p in pairs], dtype=np.int64
        )
        no_pairs = len(pairs) == 0
        predicate_term = None
        if not no_pairs:
            fg = np.where(targets != BACKGROUND_PREDICATE)[0]
            bg = np.where(targets == BACKGROUND_PREDICATE)[0]
            n_bg = min(
                len(bg),
                int(round(c.background_pair_sample_ratio * max(len(fg), 1))),
            )
            keep = np.concatenate([fg, rng.permutation(bg)[:n_bg]]) if len(bg) else fg
            keep.sort()
            if len(keep) == 0:
                predicate_term = None
            elif c.weighted_relation_loss and class_weights is not None:
                sel_targets = targets[keep]
                w = np.asarray(class_weights, dtype=np.float64)[sel_targets]
                ce = T.cross_entropy(
                    T.gather_rows(pair_logits, keep), sel_targets, reduction="none"
                )
                predicate_term = (ce * w).sum() * (1.0 / w.sum())
            else:
                predicate_term = T.cross_entropy(
                    T.gather_rows(pair_logits, keep), targets[keep]
                )
        object_term = None
        if c.include_object_loss and object_logits is not None and graph.labels:
            object_term = T.cross_entropy(object_logits, graph.labels)
        terms = [t for t in (predicate_term, object_term) if t is not None]
        if not terms:
            loss = T.Tensor(0.0)
        elif len(terms) == 1:
            loss = terms[0]
        else:
            loss = terms[0] + terms[1]
        return RelationLossResult(loss, predicate_term, object_term, no_pairs)

    # --- language side ------------------------------------------------------

    def decode_teacher_forced(self, tape, enc: EncoderOutput, token_ids,
                              rng=None, training=False):
        """Next-token logits (m, vocab) for an input that starts with BOS."""
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size < 1:
            raise ValueError("caption token ids must be a non-empty 1-D sequence")
        if ids[0] != BOS_ID:
            raise ValueError("teacher-forced input must start with BOS")
        if ids.min() < 0 or ids.max() >= self.config.caption_vocab_size:
            raise IndexError(
                f"token id out of range [0, {self.config.caption_vocab_size})"
            )
        m = ids.size
        if m > self._pos_table.shape[0]:
            self._pos_table = positional_encoding(m, self.config.d)
        emb = self.token_embed.forward(tape, ids) * np.sqrt(self.config.d)
        y = emb + self._pos_table[:m]
        for layer in self.decoder_layers:
            y = layer.forward(tape, y, enc.features, enc.pad_mask,
                              rng=rng, training=training)
        return self.out_proj.forward(tape, self.decoder_norm.forward(tape, y))

    def caption_loss(self, logits, targets, pad_id=PAD_ID):
        """Mean next-token cross-entropy with PAD rows ignored."""
        return T.cross_entropy(logits, targets, ignore_index=pad_id)

    def total_loss(self, caption_term, relation_result: RelationLossResult | None = None,
                   lambda_=None) -> LossBreakdown:
        """total = caption + lambda * relation. lambda=0 collapses to the
        caption term exactly: the relation graph never enters the total."""
        lam = self.config.lambda_ if lambda_ is None else lambda_
        if lam < 0:
            raise ValueError(f"lambda must be >= 0, got {lam}")
        if relation_result is None or lam == 0.0:
            return LossBreakdown(
                total=caption_term,
                caption=caption_term,
                relation=relation_result.loss if relation_result else None,
                object_term=relation_result.object_term if relation_result else None,
                relation_had_no_pairs=relation_result.no_pairs if relation_result else False,
            )
        return LossBreakdown(
            total=caption_term + relation_result.loss * lam,
            caption=caption_term,
            relation=relation_result.loss,
            object_term=relation_result.object_term,
            relation_had_no_pairs=relation_result.no_pairs,
        )

    # --- inference ----------------------------------------------------------

    def _step_logprobs(self, enc, prefix):
        logits = self.decode_teacher_forced(None, enc, prefix).data[-1]
        shifted = logits - logits.max()
        return shifted - np.log(np.exp(shifted).sum())

    def generate_caption(self, enc: EncoderOutput, mode="greedy", beam_size=3,
                         temperature=1.0, max_len=None, rng=None):
        """Decode a caption from encoded regions.

        greedy: argmax until EOS; beam: length-normalized log-prob over
        beam_size hypotheses; sample: temperature sampling (used by the
        self-critical trainer). Truncation at max_len is flagged.
        """
        max_len = max_len or self.config.max_caption_len
        if mode == "greedy":
            return self._decode_greedy_or_sample(enc, max_len, None, 0.0)
        if mode == "sample":
            if rng is None:
                raise ValueError("sample mode needs an rng")
            return self._decode_greedy_or_sample(enc, max_len, rng, temperature)
        if mode == "beam":
            return self._decode_beam(enc, max_len, beam_size)
        raise ValueError(f"unknown decoding mode {mode!r}")

    def _decode_greedy_or_sample(self, enc, max_len, rng, temperature):
        prefix = [BOS_ID]
        out, logps = [], []
        truncated = False
        for _ in range(max_len):
            lp = self._step_logprobs(enc, prefix)
            if rng is None:
                tok = int(np.argmax(lp))
            else:
                if temperature != 1.0:
                    scaled = lp / temperature
                    scaled -= scaled.max()
                    probs = np.exp(scaled)
                    probs /= probs.sum()
                else:
                    probs = np.exp(lp)
                    probs /= probs.sum()
                tok = int(rng.choice(len(probs), p=probs))
            logps.append(float(lp[tok]))
            prefix.append(tok)
            if tok == EOS_ID:
                break
            out.append(tok)
        else:
            truncated = True
        return CaptionResult(out, float(np.sum(logps)), truncated, logps)

    def _decode_beam(self, enc, max_len, beam_size):
        if beam_size < 1:
            raise ValueError("beam size must be >= 1")
        live = [([BOS_ID], 0.0)]
        finished = []
        for _ in range(max_len):
            candidates = []
            for prefix, score in live:
                lp = self._step_logprobs(enc, prefix)
                top = np.argsort(lp)[::-1][:beam_size]
                for tok in top:
                    candidates.append((prefix + [int(tok)], score + float(lp[tok])))
            candidates.sort(key=lambda c: c[1], reverse=True)
            live = []
            for prefix, score in candidates:
                if prefix[-1] == EOS_ID:
                    finished.append((prefix, score, False))
                else:
                    live.append((prefix, score))
                if len(live) >= beam_size:
                    break
            if not live:
                break
        for prefix, score in live:
            finished.append((prefix, score, True))

        def normalized(entry):
            prefix, score, _ = entry
            return score / max(len(prefix) - 1, 1)

        best = max(finished, key=normalized)
        ids = [t for t in best[0][1:] if t != EOS_ID]
        return CaptionResult(ids, best[1], best[2])

    def generate_scene_graph(self, enc: EncoderOutput, boxes, img_w, img_h,
                             labels=None, top_k=20):
        """Top-k scored foreground triplets plus the resulting SceneGraph.

        With labels given (predicate-classification protocol) label
        probabilities are 1; otherwise the object head supplies argmax
        labels and their probabilities multiply into the triplet score.
        """
        if top_k < 1:
            raise ValueError("top_k must be >= 1")
        n = enc.num_regions
        if labels is not None:
            used_labels = list(labels)
            label_probs = np.ones(n)
        else:
            obj = self.object_logits(None, enc)
            probs = T.softmax(obj, axis=-1).data
            used_labels = [int(i) for i in probs.argmax(axis=1)]
            label_probs = probs.max(axis=1)
        predictions = []
        pairs = enumerate_pairs(n) if n >= 2 else []
        if pairs:
            logits = self.relation_logits(None, enc, pairs, boxes, img_w, img_h)
            pred_probs = T.softmax(logits, axis=-1).data
            for row, (i, j) in enumerate(pairs):
                fg = pred_probs[row, 1:]
                p_id = int(fg.argmax()) + 1
                score = float(fg.max() * label_probs[i] * label_probs[j])
                predictions.append(
                    TripletPrediction(
                        subject_index=i,
                        object_index=j,
                        predicate_id=p_id,
                        score=score,
                        subject_label=used_labels[i],
                        object_label=used_labels[j],
                        subject_box=boxes[i],
                        object_box=boxes[j],
                    )
                )
        predictions.sort(key=lambda p: -p.score)
        predictions = predictions[:top_k]
        graph = SceneGraph(
            boxes=list(boxes),
            labels=used_labels,
            triplets=[
                (p.subject_index, p.predicate_id, p.object_index) for p in predictions
            ],
            width=img_w,
            height=img_h,
        )
        return graph, predictions
