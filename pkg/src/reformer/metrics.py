"""Caption metrics (BLEU, ROUGE-L, CIDEr-D) and scene-graph Recall@K under
the PredCls / SGCls / SGDet protocols.

All caption metrics take pre-tokenized word lists. Recall is
graph-constrained: at most one prediction per ordered region pair counts.
"""
from __future__ import annotations

import math
import warnings
from collections import Counter, defaultdict

import numpy as np

from .data import BOS_ID, EOS_ID, detokenize, normalize_words, tokenize
from .scene_graph import SceneGraph, TripletPrediction, enumerate_pairs, iou

SGG_MODES = ("predcls", "sgcls", "sgdet")
SGDET_IOU_THRESHOLD = 0.5
ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
CIDER_MAX_N = 4


def ngram_counts(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# --- BLEU --------------------------------------------------------------------


def corpus_bleu(candidates, references, n=4):
    """Corpus-level BLEU-n: clipped modified precision with brevity penalty.

    candidates: list of token lists; references: per-candidate list of token
    lists. No smoothing: a zero clipped count at any order gives 0.
    """
    if len(candidates) != len(references):
        raise ValueError("one reference list per candidate is required")
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be 1..4, got {n}")
    correct = [0] * n
    guess = [0] * n
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("every candidate needs at least one reference")
        if not cand:
            warnings.warn("empty candidate scored as zero overlap", stacklevel=2)
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for k in range(1, n + 1):
            counts = ngram_counts(cand, k)
            max_ref = Counter()
            for r in refs:
                for gram, c in ngram_counts(r, k).items():
                    max_ref[gram] = max(max_ref[gram], c)
            correct[k - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            guess[k - 1] += max(len(cand) - k + 1, 0)
    log_precision = 0.0
    for k in range(n):
        if correct[k] == 0 or guess[k] == 0:
            return 0.0
        log_precision += math.log(correct[k] / guess[k])
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / max(cand_len, 1))
    return bp * math.exp(log_precision / n)


def bleu(candidate, references, n=4):
    """Single-candidate convenience wrapper around corpus_bleu."""
    return corpus_bleu([candidate], [references], n)


# --- ROUGE-L -----------------------------------------------------------------


def _lcs_length(a, b):
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate, references):
    """LCS F-measure with beta=1.2; precision/recall each maxed over refs."""
    if not references:
        raise ValueError("rouge_l needs at least one reference")
    if not candidate:
        return 0.0
    prec, rec = [], []
    for ref in references:
        lcs = _lcs_length(ref, candidate)
        prec.append(lcs / len(candidate))
        rec.append(lcs / len(ref) if ref else 0.0)
    p, r = max(prec), max(rec)
    if p == 0.0 or r == 0.0:
        return 0.0
    beta2 = ROUGE_BETA**2
    return (1 + beta2) * p * r / (r + beta2 * p)


def corpus_rouge_l(candidates, references):
    if len(candidates) != len(references):
        raise ValueError("one reference list per candidate is required")
    return float(
        np.mean([rouge_l(c, r) for c, r in zip(candidates, references)])
    )


# --- CIDEr-D -----------------------------------------------------------------


class CiderDScorer:
    """CIDEr-D with document frequencies frozen from a reference corpus.

    TF-IDF n-gram cosine per order 1..4 with count clipping, a Gaussian
    length penalty (sigma 6), averaged over orders and references, x10.
    """

    def __init__(self, reference_corpus):
        self.n_images = len(reference_corpus)
        if self.n_images == 0:
            raise ValueError("CIDEr-D needs at least one reference set")
        if self.n_images == 1:
            warnings.warn(
                "single-image corpus: IDF is degenerate and scores collapse to 0",
                stacklevel=2,
            )
        for refs in reference_corpus:
            if not refs:
                raise ValueError("every image needs at least one reference")
        self.doc_freq = defaultdict(int)
        for refs in reference_corpus:
            seen = set()
            for ref in refs:
                for k in range(1, CIDER_MAX_N + 1):
                    seen.update(ngram_counts(ref, k))
            for gram in seen:
                self.doc_freq[gram] += 1
        self.log_ref = np.log(float(self.n_images))

    def _vector(self, tokens):
        vec = [defaultdict(float) for _ in range(CIDER_MAX_N)]
        norm = [0.0] * CIDER_MAX_N
        for k in range(1, CIDER_MAX_N + 1):
            for gram, tf in ngram_counts(tokens, k).items():
                idf = self.log_ref - np.log(max(1.0, self.doc_freq[gram]))
                vec[k - 1][gram] = tf * idf
                norm[k - 1] += vec[k - 1][gram] ** 2
        return vec, [math.sqrt(v) for v in norm], len(tokens)

    def score_image(self, candidate, references):
        cv, cn, cl = self._vector(candidate)
        total = np.zeros(CIDER_MAX_N)
        for ref in references:
            rv, rn, rl = self._vector(ref)
            penalty = math.exp(-((cl - rl) ** 2) / (2 * CIDER_SIGMA**2))
            for k in range(CIDER_MAX_N):
                sim = sum(
                    min(w, rv[k][g]) * rv[k][g] for g, w in cv[k].items()
                )
                if cn[k] > 0 and rn[k] > 0:
                    sim /= cn[k] * rn[k]
                total[k] += sim * penalty
        return 10.0 * float(total.mean()) / len(references)


def cider_d(candidates, references):
    """Corpus CIDEr-D. IDF comes from the given references.

    Returns (corpus mean, per-image scores).
    """
    if len(candidates) != len(references):
        raise ValueError("one reference list per candidate is required")
    scorer = CiderDScorer(references)
    scores = [
        scorer.score_image(c, r) for c, r in zip(candidates, references)
    ]
    return float(np.mean(scores)), scores


# --- scene-graph recall --------------------------------------------------------


def _constrained_top_k(predictions, k):
    """Highest-scoring prediction per ordered pair, then global top-k."""
    ordered = sorted(predictions, key=lambda p: -p.score)
    best = []
    seen = set()
    for p in ordered:
        key = (p.subject_index, p.object_index)
        if key in seen:
            continue
        seen.add(key)
        best.append(p)
        if len(best) == k:
            break
    return best


def _matches(pred: TripletPrediction, gt_triplet, gt: SceneGraph, mode):
    s, p, o = gt_triplet
    if mode == "predcls":
        return (
            pred.subject_index == s
            and pred.object_index == o
            and pred.predicate_id == p
        )
    if mode == "sgcls":
        return (
            pred.subject_index == s
            and pred.object_index == o
            and pred.predicate_id == p
            and pred.subject_label == gt.labels[s]
            and pred.object_label == gt.labels[o]
        )
    if mode == "sgdet":
        if pred.subject_box is None or pred.object_box is None:
            raise ValueError("sgdet predictions must carry boxes")
        return (
            pred.predicate_id == p
            and pred.subject_label == gt.labels[s]
            and pred.object_label == gt.labels[o]
            and iou(pred.subject_box, gt.boxes[s]) >= SGDET_IOU_THRESHOLD
            and iou(pred.object_box, gt.boxes[o]) >= SGDET_IOU_THRESHOLD
        )
    raise ValueError(f"unknown mode {mode!r}; expected one of {SGG_MODES}")


def recall_at_k(predictions, gt: SceneGraph, k, mode):
    """Fraction of ground-truth triplets matched by the top-k predictions."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not gt.triplets:
        raise ValueError("ground-truth graph has no triplets to recall")
    top = _constrained_top_k(predictions, k)
    hit = sum(
        1
        for t in gt.triplets
        if any(_matches(p, t, gt, mode) for p in top)
    )
    return hit / len(gt.triplets)


# --- model-level harnesses -----------------------------------------------------


def caption_references(record):
    return [normalize_words(c) for c in record.captions]


def evaluate_captions(model, records, vocab, mode="greedy", beam_size=3):
    """Corpus caption metrics for generated captions against all references."""
    candidates, references = [], []
    for record in records:
        tokens = model.embed_regions(
            None,
            record.feature_matrix(),
            [r.box for r in record.regions],
            [r.label_id for r in record.regions],
            record.width,
            record.height,
        )
        enc = model.encode(None, tokens)
        result = model.generate_caption(enc, mode=mode, beam_size=beam_size)
        candidates.append(normalize_words(detokenize(result.ids, vocab)))
        references.append(caption_references(record))
    cider_corpus, _ = cider_d(candidates, references)
    return {
        "bleu1": corpus_bleu(candidates, references, 1),
        "bleu4": corpus_bleu(candidates, references, 4),
        "rougeL": corpus_rouge_l(candidates, references),
        "ciderD": cider_corpus,
    }


def sgg_predictions(model, record, mode, proposal_record=None):
    """Scored triplet predictions for one image under an SGG protocol.

    predcls embeds ground-truth boxes and labels; sgcls embeds ground-truth
    boxes with unknown labels and predicts labels; sgdet runs on external
    proposal regions (an ImageRecord carrying proposal boxes + features).
    """
    if mode not in SGG_MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {SGG_MODES}")
    if mode == "sgdet":
        if proposal_record is None:
            raise ValueError("sgdet needs external region proposals")
        source = proposal_record
        labels = None
    else:
        source = record
        labels = [r.label_id for r in record.regions] if mode == "predcls" else None
    tokens = model.embed_regions(
        None,
        source.feature_matrix(),
        [r.box for r in source.regions],
        labels,
        source.width,
        source.height,
    )
    enc = model.encode(None, tokens)
    n = len(source.regions)
    _, predictions = model.generate_scene_graph(
        enc,
        [r.box for r in source.regions],
        source.width,
        source.height,
        labels=labels,
        top_k=max(len(enumerate_pairs(n)) if n >= 2 else 0, 1),
    )
    return predictions


def evaluate_sgg(model, records, mode, ks=(20, 50, 100), proposals=None):
    """Mean per-image recall at each k. Images without ground-truth
    triplets are skipped (with a warning), matching the recall contract."""
    proposals = proposals or {}
    per_k = {k: [] for k in ks}
    skipped = 0
    for record in records:
        if not record.triplets:
            skipped += 1
            continue
        proposal_record = proposals.get(record.image_id)
        if mode == "sgdet" and proposal_record is None:
            raise ValueError(
                f"sgdet needs proposals for image {record.image_id!r}"
            )
        preds = sgg_predictions(model, record, mode, proposal_record)
        gt = record.graph()
        for k in ks:
            per_k[k].append(recall_at_k(preds, gt, k, mode))
    if skipped:
        warnings.warn(
            f"skipped {skipped} images without ground-truth triplets",
            stacklevel=2,
        )
    if not any(per_k.values()):
        raise ValueError("no evaluable images: every record lacks triplets")
    return [
        {"mode": mode, "k": k, "recall": float(np.mean(per_k[k]))} for k in ks
    ]


def caption_loss_on(model, records, vocab):
    """Mean teacher-forced caption cross-entropy on a read-only snapshot."""
    from . import tensor as T

    losses = []
    for record in records:
        ids = [BOS_ID] + tokenize(record.captions[0], vocab) + [EOS_ID]
        tokens = model.embed_regions(
            None,
            record.feature_matrix(),
            [r.box for r in record.regions],
            [r.label_id for r in record.regions],
            record.width,
            record.height,
        )
        enc = model.encode(None, tokens)
        logits = model.decode_teacher_forced(None, enc, ids[:-1])
        losses.append(float(T.cross_entropy(logits, ids[1:]).data))
    return float(np.mean(losses))


def next_token_accuracy(model, records, vocab):
    """Teacher-forced argmax accuracy over the primary training captions."""
    correct = total = 0
    for record in records:
        ids = [BOS_ID] + tokenize(record.captions[0], vocab) + [EOS_ID]
        tokens = model.embed_regions(
            None,
            record.feature_matrix(),
            [r.box for r in record.regions],
            [r.label_id for r in record.regions],
            record.width,
            record.height,
        )
        enc = model.encode(None, tokens)
        logits = model.decode_teacher_forced(None, enc, ids[:-1]).data
        pred = logits.argmax(axis=1)
        target = np.asarray(ids[1:])
        correct += int((pred == target).sum())
        total += len(target)
    return correct / total if total else 0.0


def foreground_predicate_accuracy(model, records):
    """Argmax predicate accuracy over the stored foreground pairs."""
    correct = total = 0
    for record in records:
        if not record.triplets:
            continue
        tokens = model.embed_regions(
            None,
            record.feature_matrix(),
            [r.box for r in record.regions],
            [r.label_id for r in record.regions],
            record.width,
            record.height,
        )
        enc = model.encode(None, tokens)
        boxes = [r.box for r in record.regions]
        pairs = [(s, o) for s, _, o in record.triplets]
        logits = model.relation_logits(
            None, enc, pairs, boxes, record.width, record.height
        ).data
        pred = logits.argmax(axis=1)
        target = np.asarray([p for _, p, _ in record.triplets])
        correct += int((pred == target).sum())
        total += len(target)
    return correct / total if total else 0.0
