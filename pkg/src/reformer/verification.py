"""Finite-difference verification suite: every op, every layer, and the
full combined loss are checked against central differences across many
random configurations. The CLI `gradcheck` subcommand and the acceptance
tests both run this.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import BOS_ID, EOS_ID
from .layers import DecoderLayer, EncoderLayer, MultiHeadAttention
from .model import ReFormer, ReFormerConfig
from .scene_graph import BoundingBox, SceneGraph, enumerate_pairs

DEFAULT_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float
    seconds: float

    @property
    def passed(self):
        return self.max_rel_err < self.tolerance


def _random_boxes(rng, n, img_w=64.0, img_h=64.0):
    boxes = []
    for _ in range(n):
        w = rng.uniform(8, 24)
        h = rng.uniform(8, 24)
        x1 = rng.uniform(0, img_w - w)
        y1 = rng.uniform(0, img_h - h)
        boxes.append(BoundingBox(x1, y1, x1 + w, y1 + h))
    return boxes


def _op_checks(rng):
    """(name, f, x) triples; f maps a tracked tensor to a scalar."""
    n, c = int(rng.integers(2, 5)), int(rng.integers(3, 6))
    w = rng.normal(size=(c, n))
    targets = rng.integers(0, c, size=n)
    gamma = rng.normal(size=c) + 1.0
    beta = rng.normal(size=c)
    other = rng.normal(size=(n, c))
    row = rng.normal(size=(1, c))
    yield ("add.broadcast", lambda x: (x + T.Tensor(row)).sum(), rng.normal(size=(n, c)))
    yield ("sub", lambda x: (x - T.Tensor(other)).sum(), rng.normal(size=(n, c)))
    yield (
        "mul",
        lambda x: (x * T.Tensor(other) * x).sum(),
        rng.normal(size=(n, c)),
    )
    yield ("matmul", lambda x: T.matmul(x, T.Tensor(w)).sum(), rng.normal(size=(n, c)))
    yield (
        "softmax",
        lambda x: (T.softmax(x, axis=-1) * T.Tensor(other)).sum(),
        rng.normal(size=(n, c)),
    )
    yield (
        "layer_norm",
        lambda x: (
            T.layer_norm(x, T.Tensor(gamma), T.Tensor(beta)) * T.Tensor(other)
        ).sum(),
        rng.normal(size=(n, c)),
    )
    yield (
        "cross_entropy",
        lambda x: T.cross_entropy(x, targets),
        rng.normal(size=(n, c)),
    )
    yield ("gelu", lambda x: T.gelu(x).sum(), rng.normal(size=(n, c)))
    yield (
        "gather_rows",
        lambda x: T.gather_rows(x, [0, 1, 0]).sum(),
        rng.normal(size=(n, c)),
    )
    yield (
        "reshape.transpose",
        lambda x: (x.reshape((c, n)).transpose() * T.Tensor(other)).sum(),
        rng.normal(size=(n, c)),
    )


def _layer_checks(rng, seed):
    d = int(rng.choice([8, 16]))
    h = int(rng.choice([1, 2, 4]))
    n = int(rng.integers(2, 5))
    mix = rng.normal(size=(n, d))
    attn = MultiHeadAttention(d, h, np.random.default_rng(seed + 1))
    yield (
        f"attention.d{d}h{h}",
        lambda x: (attn.forward(x.tape, x, x, x) * T.Tensor(mix)).sum(),
        rng.normal(size=(n, d)),
    )
    enc_layer = EncoderLayer(d, h, 2, 0.0, np.random.default_rng(seed + 2))
    yield (
        f"encoder_layer.d{d}h{h}",
        lambda x: (enc_layer.forward(x.tape, x) * T.Tensor(mix)).sum(),
        rng.normal(size=(n, d)),
    )
    dec_layer = DecoderLayer(d, h, 2, 0.0, np.random.default_rng(seed + 3))
    memory = rng.normal(size=(n + 1, d))
    yield (
        f"decoder_layer.d{d}h{h}",
        lambda x: (
            dec_layer.forward(x.tape, x, T.Tensor(memory)) * T.Tensor(mix)
        ).sum(),
        rng.normal(size=(n, d)),
    )


def _toy_model_loss(seed, rng):
    """A tiny full model plus a loss closure over a fixed random image."""
    cfg = ReFormerConfig(
        d=8, h=2, n_enc=1, n_dec=1, d_b=4, d_l=4, d_h=8, d_vis=6,
        dropout=0.0, ffn_mult=2, n_object_classes=3, n_predicates=3,
        caption_vocab_size=9, max_caption_len=6,
    )
    model = ReFormer(cfg, seed=seed)
    n = int(rng.integers(2, 4))
    feats = rng.normal(size=(n, cfg.d_vis))
    boxes = _random_boxes(rng, n)
    labels = [int(v) for v in rng.integers(0, cfg.n_object_classes, size=n)]
    pairs = enumerate_pairs(n)
    graph = SceneGraph(boxes, labels, [(0, 1, 1)], 64.0, 64.0)
    ids = [BOS_ID] + [int(v) for v in rng.integers(4, 9, size=3)] + [EOS_ID]

    def loss_fn(tape):
        tokens = model.embed_regions(tape, feats, boxes, labels, 64.0, 64.0)
        enc = model.encode(tape, tokens)
        logits = model.decode_teacher_forced(tape, enc, ids[:-1])
        caption = model.caption_loss(logits, ids[1:])
        pair_logits = model.relation_logits(tape, enc, pairs, boxes, 64.0, 64.0)
        rel = model.relation_loss(
            tape, pair_logits, pairs, graph, np.random.default_rng(0),
            object_logits=model.object_logits(tape, enc),
        )
        return model.total_loss(caption, rel).total

    return model, loss_fn


def run_gradient_suite(n_configs=20, tolerance=DEFAULT_TOLERANCE, eps=1e-5, seed=0):
    """Finite-difference checks over n_configs random shapes per check kind."""
    results = []
    for k in range(n_configs):
        rng = np.random.default_rng(seed + 1000 * k)
        for name, f, x in _op_checks(rng):
            t0 = time.perf_counter()
            err = T.grad_check(f, x, eps=eps)
            results.append(
                CheckResult(f"{name}[{k}]", err, tolerance, time.perf_counter() - t0)
            )
        for name, f, x in _layer_checks(rng, seed + 1000 * k):
            t0 = time.perf_counter()
            err = T.grad_check(f, x, eps=eps, max_coords=12, seed=seed + k)
            results.append(
                CheckResult(f"{name}[{k}]", err, tolerance, time.perf_counter() - t0)
            )
        model, loss_fn = _toy_model_loss(seed + k, rng)
        t0 = time.perf_counter()
        err = T.grad_check_params(
            loss_fn, model.named_parameters(), eps=eps, max_coords=3, seed=seed + k
        )
        results.append(
            CheckResult(
                f"full_model_loss[{k}]", err, tolerance, time.perf_counter() - t0
            )
        )
    return results
