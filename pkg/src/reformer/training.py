"""Adam, the warmup learning-rate schedule, the three-step sequential
training driver, and self-critical sequence training on the CIDEr-D reward.

The schedule is: (i) scene-graph pre-training of the encoder and heads,
(ii) caption training under the combined objective, (iii) self-critical
fine-tuning at a small fixed learning rate. Step (iii) refuses to run
without a step-(ii) model.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import BOS_ID, EOS_ID, UNK_ID, tokenize
from .metrics import (
    CiderDScorer,
    caption_references,
    foreground_predicate_accuracy,
    next_token_accuracy,
)
from .model import LossBreakdown, ReFormer
from .scene_graph import BACKGROUND_PREDICATE, enumerate_pairs


class NanGradientError(FloatingPointError):
    """A gradient went NaN; the message names the parameter."""


class TrainingScheduleError(RuntimeError):
    """A training step ran out of order."""


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr):
    """Bias-corrected Adam update. params: {name: Parameter};
    grads: {name: array or None}. Frozen and gradient-less params are
    skipped; a NaN gradient aborts with the parameter name."""
    state.step += 1
    t = state.step
    for name, param in params.items():
        g = grads.get(name)
        if g is None or not param.trainable:
            continue
        if not np.isfinite(g).all():
            raise NanGradientError(f"non-finite gradient for parameter {name!r}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        v = state.v[name]
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_gradients(grads, max_norm):
    """Scale all gradients down to a global L2 norm of max_norm."""
    total = 0.0
    for g in grads.values():
        if g is not None:
            total += float((g * g).sum())
    norm = np.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        grads = {k: (g * scale if g is not None else None) for k, g in grads.items()}
    return grads, norm


def warmup_lr(step, d, warmup=10000):
    """lr = d^-0.5 * min(step^-0.5, step * warmup^-1.5); linear ramp up to
    the knee at step == warmup, then inverse-sqrt decay."""
    if step < 1:
        raise ValueError("schedule steps start at 1")
    return d**-0.5 * min(step**-0.5, step * warmup**-1.5)


@dataclass
class TrainPlan:
    """Knobs for one training step of the schedule."""

    epochs: int = 10
    batch_size: int = 8
    seed: int = 42
    clip_norm: float = 1.0
    warmup: int | None = None  # None: take the config value
    fixed_lr: float | None = None  # overrides the warmup schedule
    log_path: str | None = None
    eval_every: int = 10
    stop_token_accuracy: float | None = None
    stop_predicate_accuracy: float | None = None
    scst_iterations: int = 50
    shuffle: bool = True


@dataclass
class TrainResult:
    rows: list = field(default_factory=list)
    epochs_run: int = 0
    final_metrics: dict = field(default_factory=dict)

    @property
    def losses(self):
        return [r["loss_total"] for r in self.rows]


def predicate_class_weights(records, n_predicates):
    """Mean-normalized inverse predicate frequency; background capped at 1."""
    counts = np.zeros(n_predicates)
    for record in records:
        for _, p, _ in record.triplets:
            counts[p] += 1
        n = len(record.regions)
        n_pairs = n * (n - 1)
        counts[BACKGROUND_PREDICATE] += max(n_pairs - len(record.triplets), 0)
    counts = np.maximum(counts, 1.0)
    weights = counts.mean() / counts
    weights[BACKGROUND_PREDICATE] = min(weights[BACKGROUND_PREDICATE], 1.0)
    return weights


def _encode_record(model, tape, record, rng=None, training=False):
    tokens = model.embed_regions(
        tape,
        record.feature_matrix(),
        [r.box for r in record.regions],
        [r.label_id for r in record.regions],
        record.width,
        record.height,
    )
    return model.encode(tape, tokens, rng=rng, training=training)


def _relation_result(model, tape, record, enc, rng, class_weights):
    boxes = [r.box for r in record.regions]
    pairs = enumerate_pairs(len(boxes)) if len(boxes) >= 2 else []
    pair_logits = model.relation_logits(
        tape, enc, pairs, boxes, record.width, record.height
    )
    obj_logits = (
        model.object_logits(tape, enc) if model.config.include_object_loss else None
    )
    return model.relation_loss(
        tape, pair_logits, pairs, record.graph(), rng,
        object_logits=obj_logits, class_weights=class_weights,
    )


def _caption_ids(record, vocab):
    return [BOS_ID] + tokenize(record.captions[0], vocab) + [EOS_ID]


def _mean_loss(losses):
    total = losses[0]
    for x in losses[1:]:
        total = total + x
    return total * (1.0 / len(losses))


def _write_log(plan, rows):
    if plan.log_path:
        with open(plan.log_path, "w") as f:
            for row in rows:
                f.write(json.dumps(row) + "\n")


def _run_epochs(model, records, plan, objective, frozen_prefixes=(),
                stop_check=None):
    """Shared batch loop: shuffle, forward, backward, clip, Adam.

    objective(tape, record, rng) -> LossBreakdown. Returns TrainResult.
    """
    if not records:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(plan.seed)
    state = AdamState()
    params = dict(model.named_parameters())
    trainable = {
        name: p
        for name, p in params.items()
        if not any(name.startswith(pref) for pref in frozen_prefixes)
    }
    warmup = plan.warmup if plan.warmup is not None else model.config.warmup_steps
    result = TrainResult()
    global_step = 0
    for epoch in range(plan.epochs):
        order = rng.permutation(len(records)) if plan.shuffle else np.arange(len(records))
        for start in range(0, len(records), plan.batch_size):
            batch = [records[i] for i in order[start : start + plan.batch_size]]
            tape = T.Tape()
            breakdowns = [objective(tape, rec, rng) for rec in batch]
            batch_loss = _mean_loss([b.total for b in breakdowns])
            tape.backward(batch_loss)
            grads = {name: tape.grad(p) for name, p in trainable.items()}
            grads, _ = clip_gradients(grads, plan.clip_norm)
            global_step += 1
            lr = (
                plan.fixed_lr
                if plan.fixed_lr is not None
                else warmup_lr(global_step, model.config.d, warmup)
            )
            adam_step(trainable, grads, state, lr)
            means = {
                key: float(np.mean([b.floats()[key] for b in breakdowns]))
                for key in ("loss_total", "loss_caption", "loss_relation")
            }
            result.rows.append({"step": global_step, "lr": lr, **means})
        result.epochs_run = epoch + 1
        if stop_check and (epoch + 1) % plan.eval_every == 0 and stop_check():
            break
    _write_log(plan, result.rows)
    return result


def run_step1_sgg(model: ReFormer, records, plan: TrainPlan) -> TrainResult:
    """Step (i): train encoder + relation/object heads with the relation
    objective only; decoder parameters are excluded and stay bit-identical."""
    weights = (
        predicate_class_weights(records, model.config.n_predicates)
        if model.config.weighted_relation_loss
        else None
    )

    def objective(tape, record, rng):
        enc = _encode_record(model, tape, record, rng=rng, training=True)
        rel = _relation_result(model, tape, record, enc, rng, weights)
        return LossBreakdown(total=rel.loss, relation=rel.loss,
                             object_term=rel.object_term,
                             relation_had_no_pairs=rel.no_pairs)

    def stop_check():
        if plan.stop_predicate_accuracy is None:
            return False
        acc = foreground_predicate_accuracy(model, records)
        return acc >= plan.stop_predicate_accuracy

    result = _run_epochs(
        model, records, plan, objective,
        frozen_prefixes=("decoder.",), stop_check=stop_check,
    )
    result.final_metrics["predicate_accuracy"] = foreground_predicate_accuracy(
        model, records
    )
    model.config.train_stage = "sgg"
    return result


def run_step2_caption(model: ReFormer, records, vocab, plan: TrainPlan) -> TrainResult:
    """Step (ii): all parameters under total = caption + lambda * relation.

    Honors freeze_encoder_in_caption (the encoder and region embedding stay
    untouched) and use_relation_loss (off trains on the caption term alone).
    """
    if model.config.caption_vocab_size != len(vocab):
        raise ValueError(
            f"vocabulary size {len(vocab)} does not match model config "
            f"{model.config.caption_vocab_size}"
        )
    cfg = model.config
    use_rel = cfg.use_relation_loss and cfg.lambda_ > 0
    weights = (
        predicate_class_weights(records, cfg.n_predicates)
        if use_rel and cfg.weighted_relation_loss
        else None
    )
    frozen = ("region_embed.", "encoder.") if cfg.freeze_encoder_in_caption else ()

    def objective(tape, record, rng):
        enc = _encode_record(model, tape, record, rng=rng, training=True)
        ids = _caption_ids(record, vocab)
        logits = model.decode_teacher_forced(
            tape, enc, ids[:-1], rng=rng, training=True
        )
        caption_term = model.caption_loss(logits, ids[1:])
        rel = (
            _relation_result(model, tape, record, enc, rng, weights)
            if use_rel
            else None
        )
        return model.total_loss(caption_term, rel)

    def stop_check():
        if plan.stop_token_accuracy is None and plan.stop_predicate_accuracy is None:
            return False
        if plan.stop_token_accuracy is not None:
            if next_token_accuracy(model, records, vocab) < plan.stop_token_accuracy:
                return False
        if plan.stop_predicate_accuracy is not None:
            if foreground_predicate_accuracy(model, records) < plan.stop_predicate_accuracy:
                return False
        return True

    result = _run_epochs(model, records, plan, objective,
                         frozen_prefixes=frozen, stop_check=stop_check)
    result.final_metrics["token_accuracy"] = next_token_accuracy(model, records, vocab)
    model.config.train_stage = "caption"
    return result


def scst_loss(sample_logprobs, reward, baseline):
    """REINFORCE with a baseline: -(reward - baseline) * sum(logprobs).

    Gradient flows only through the log-probabilities; the advantage is a
    constant. Zero advantage means a zero loss and a zero update.
    """
    logprobs = sample_logprobs if isinstance(sample_logprobs, T.Tensor) else T.Tensor(sample_logprobs)
    return logprobs.sum() * (-(float(reward) - float(baseline)))


def run_step3_scst(model: ReFormer, records, vocab, plan: TrainPlan) -> TrainResult:
    """Step (iii): self-critical fine-tuning on the CIDEr-D reward.

    Per image: sample a caption at temperature 1, greedy-decode the
    baseline, reward their CIDEr-D difference, and push the sampled
    tokens' log-probabilities. The relation term stays in per config.
    """
    if model.config.train_stage not in ("caption", "scst"):
        raise TrainingScheduleError(
            "step (iii) requires a model trained through step (ii); "
            f"current stage is {model.config.train_stage!r}"
        )
    if not records:
        raise ValueError("empty dataset")
    for record in records:
        if not record.captions:
            raise ValueError(f"image {record.image_id!r} has no reference captions")
    cfg = model.config
    refs = [caption_references(r) for r in records]
    scorer = CiderDScorer(refs)
    refs_by_id = {r.image_id: rf for r, rf in zip(records, refs)}
    keep_rel = cfg.scst_keep_relation_loss and cfg.use_relation_loss and cfg.lambda_ > 0
    weights = (
        predicate_class_weights(records, cfg.n_predicates)
        if keep_rel and cfg.weighted_relation_loss
        else None
    )
    rng = np.random.default_rng(plan.seed)
    state = AdamState()
    params = dict(model.named_parameters())
    lr = plan.fixed_lr if plan.fixed_lr is not None else cfg.scst_lr
    result = TrainResult()
    order = []
    for it in range(1, plan.scst_iterations + 1):
        while len(order) < plan.batch_size:
            order.extend(rng.permutation(len(records)).tolist())
        batch = [records[order.pop(0)] for _ in range(plan.batch_size)]
        tape = T.Tape()
        surrogates, rel_values = [], []
        for record in batch:
            enc_eval = _encode_record(model, None, record)
            sample = model.generate_caption(enc_eval, mode="sample", rng=rng)
            greedy = model.generate_caption(enc_eval, mode="greedy")
            image_refs = refs_by_id[record.image_id]
            sample_words = [vocab.word(i) for i in sample.ids if i > UNK_ID]
            greedy_words = [vocab.word(i) for i in greedy.ids if i > UNK_ID]
            r_sample = scorer.score_image(sample_words, image_refs)
            r_greedy = scorer.score_image(greedy_words, image_refs)
            enc = _encode_record(model, tape, record, rng=rng, training=True)
            full = [BOS_ID] + sample.ids + ([] if sample.truncated else [EOS_ID])
            logits = model.decode_teacher_forced(
                tape, enc, full[:-1], rng=rng, training=True
            )
            ce = T.cross_entropy(logits, full[1:], reduction="none")
            loss_i = scst_loss(ce * -1.0, r_sample, r_greedy)
            if keep_rel:
                rel = _relation_result(model, tape, record, enc, rng, weights)
                rel_values.append(float(rel.loss.data))
                loss_i = loss_i + rel.loss * cfg.lambda_
            surrogates.append(loss_i)
        batch_loss = _mean_loss(surrogates)
        tape.backward(batch_loss)
        grads = {name: tape.grad(p) for name, p in params.items()}
        grads, _ = clip_gradients(grads, plan.clip_norm)
        adam_step(params, grads, state, lr)
        result.rows.append(
            {
                "step": it,
                "lr": lr,
                "loss_total": float(batch_loss.data),
                "loss_caption": float(batch_loss.data),
                "loss_relation": float(np.mean(rel_values)) if rel_values else 0.0,
            }
        )
    result.epochs_run = plan.scst_iterations
    _write_log(plan, result.rows)
    model.config.train_stage = "scst"
    return result
