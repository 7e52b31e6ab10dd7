"""Similarity network: exemplar encoding, cosine matching and few-shot losses.

Support rows are always label-major (``shots`` consecutive rows per episode
label), which is what ``class_average`` assumes.
"""
from __future__ import annotations

import math

import numpy as np

from .diffmath import ContractError, ParamStore, linear, linear_backward, relu, relu_backward, softmax_cross_entropy
from .proposals import ModelDims

NORM_EPS = 1e-12
DEFAULT_TEMPERATURE = 0.1


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value: float, iteration: int | None = None):
        where = "" if iteration is None else f" at iteration {iteration}"
        super().__init__(f"non-finite {component} = {value}{where}")
        self.component = component
        self.value = value
        self.iteration = iteration


def init_encoder_params(store: ParamStore, dims: ModelDims, rng: np.random.Generator) -> None:
    store.add_glorot("enc.proj.W", dims.feature_dim, dims.hidden, rng)
    store.add("enc.proj.b", np.zeros(dims.hidden))
    # the row encoder also encodes the untrimmed map, and the embedding
    # projection is shared with stage 2 of the proposal subnet
    store.add_glorot("embed.W", dims.hidden, dims.embed_dim, rng)
    store.add("embed.b", np.zeros(dims.embed_dim))


def encode_rows(raw, params: ParamStore):
    """Shared row encoder ``relu(x W + b)``, applied to exemplars and to every
    row of an untrimmed map. Returns ``(h, cache)``."""
    x = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    pre = linear(x, params["enc.proj.W"], params["enc.proj.b"])
    return relu(pre), (x, pre)


def encode_rows_backward(cache, d_h, params: ParamStore) -> None:
    x, pre = cache
    _, dw, db = linear_backward(x, params["enc.proj.W"], relu_backward(pre, d_h))
    params.accumulate("enc.proj.W", dw)
    params.accumulate("enc.proj.b", db)


def encode_exemplar(raw, params: ParamStore):
    """Map raw exemplar features ``(M, D_raw)`` to ``f(S_j)``; returns ``(f, cache)``."""
    h, row_cache = encode_rows(raw, params)
    pre = linear(h, params["embed.W"], params["embed.b"])
    return relu(pre), (row_cache, h, pre)


def encode_exemplar_backward(cache, d_features, params: ParamStore) -> None:
    row_cache, h, pre = cache
    dh, dw, db = linear_backward(h, params["embed.W"], relu_backward(pre, d_features))
    params.accumulate("embed.W", dw)
    params.accumulate("embed.b", db)
    encode_rows_backward(row_cache, dh, params)


def _normalise(v: np.ndarray):
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    inv = np.where(norm > NORM_EPS, 1.0 / np.maximum(norm, NORM_EPS), 0.0)
    return v * inv, inv


def similarity_matrix(support, proposals):
    """Cosine similarities, rows = support vectors, columns = proposals.

    Zero vectors get similarity 0 and receive no gradient.
    Returns ``(sim, cache)``.
    """
    s = np.atleast_2d(np.asarray(support, dtype=np.float64))
    r = np.atleast_2d(np.asarray(proposals, dtype=np.float64))
    if s.shape[1] != r.shape[1]:
        raise ContractError(f"feature dims differ: {s.shape[1]} vs {r.shape[1]}")
    s_hat, s_inv = _normalise(s)
    r_hat, r_inv = _normalise(r)
    sim = np.clip(s_hat @ r_hat.T, -1.0, 1.0)
    return sim, (s_hat, s_inv, r_hat, r_inv)


def _normalise_backward(v_hat, inv, d_hat):
    # d(v/|v|) = (I - v_hat v_hat^T) / |v|
    radial = (d_hat * v_hat).sum(axis=1, keepdims=True)
    return (d_hat - radial * v_hat) * inv


def normalise_rows(v):
    """Rows scaled to unit length (zero rows stay zero); returns ``(v_hat, cache)``."""
    v_hat, inv = _normalise(np.atleast_2d(np.asarray(v, dtype=np.float64)))
    return v_hat, (v_hat, inv)


def normalise_rows_backward(cache, d_hat):
    return _normalise_backward(*cache, d_hat)


def similarity_backward(cache, d_sim):
    s_hat, s_inv, r_hat, r_inv = cache
    d_s = _normalise_backward(s_hat, s_inv, d_sim @ r_hat)
    d_r = _normalise_backward(r_hat, r_inv, d_sim.T @ s_hat)
    return d_s, d_r


def class_average(sim: np.ndarray, shots: int) -> np.ndarray:
    m, n = sim.shape
    if shots < 1 or m % shots:
        raise ContractError(f"{m} support rows cannot be grouped into {shots}-shot classes")
    return sim.reshape(m // shots, shots, n).mean(axis=1)


def assign_labels(sim: np.ndarray, shots: int) -> tuple[np.ndarray, np.ndarray]:
    """Episode label and winning class-averaged similarity for every column."""
    avg = class_average(np.asarray(sim, dtype=np.float64), shots)
    labels = avg.argmax(axis=0)  # first maximum wins ties
    return labels, avg[labels, np.arange(avg.shape[1])]


def fewshot_cls_loss(sim: np.ndarray, targets, shots: int, temperature: float = DEFAULT_TEMPERATURE):
    """Cross-entropy over class-averaged similarities divided by ``temperature``.

    ``targets`` holds an episode label per column, or -1 for columns that do
    not contribute. Returns ``(loss, d_sim)``; zero when nothing contributes.
    """
    targets = np.asarray(targets, dtype=np.int64)
    d_sim = np.zeros_like(sim)
    use = np.flatnonzero(targets >= 0)
    if len(use) == 0:
        return 0.0, d_sim
    avg = class_average(sim, shots)
    logits = avg[:, use].T / temperature
    loss, d_logits = softmax_cross_entropy(logits, targets[use])
    if len(use) == 1:
        d_logits = d_logits.reshape(1, -1)
    d_avg = d_logits.T / temperature
    d_sim[:, use] = np.repeat(d_avg, shots, axis=0) / shots
    return loss, d_sim


def adaptation_loss(proposal_features, support_features):
    """L2 distance between mean proposal and mean support embeddings.

    Returns ``(loss, d_proposals, d_support)``; the gradient is taken as zero
    where the two means coincide.
    """
    r = np.atleast_2d(np.asarray(proposal_features, dtype=np.float64))
    s = np.atleast_2d(np.asarray(support_features, dtype=np.float64))
    if r.size == 0 or s.size == 0:
        raise ContractError("adaptation loss needs non-empty proposal and support sets")
    if r.shape[1] != s.shape[1]:
        raise ContractError("proposal and support features differ in dimension")
    diff = r.mean(axis=0) - s.mean(axis=0)
    loss = math.hypot(*diff)  # scaled, so tiny differences do not underflow to 0
    if loss <= NORM_EPS:
        return loss, np.zeros_like(r), np.zeros_like(s)
    unit = diff / loss
    return loss, np.tile(unit / len(r), (len(r), 1)), np.tile(-unit / len(s), (len(s), 1))


LOSS_NAMES = ("L_p1", "L_p2", "L_fewshot", "L_adapt")


def total_loss(l_p1: float, l_p2: float, l_fewshot: float, l_adapt: float, lam: float,
               iteration: int | None = None) -> float:
    if lam < 0:
        raise ContractError("adaptation weight must be non-negative")
    for name, value in zip(LOSS_NAMES, (l_p1, l_p2, l_fewshot, l_adapt)):
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value, iteration)
    return l_p1 + l_p2 + l_fewshot + lam * l_adapt
