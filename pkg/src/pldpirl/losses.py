"""Contrastive objectives: NCE against a memory bank plus the
patch-level instance-group discrimination (PLD) term.

All embeddings are unit vectors, so the inner product is the cosine.
Functions accept a single sample ([d]) or a batch ([B, d]) and return the
batch mean as a scalar tensor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .tensor import Tensor, as_tensor

LOG_FLOOR = 1e-12
TAU_GRID = (0.2, 0.4, 0.6)
LAMBDA_GRID = (0.1, 0.25, 0.5, 1.0)
NOISE_MODES = ("fixed", "sampled")


class LossConfigError(ValueError):
    pass


class AssignmentError(ValueError):
    pass


@dataclass
class LossConfig:
    tau: float = 0.4
    lam: float = 0.5
    negatives: int = 64
    dataset_size: int = 600
    # "fixed": noise prior |D_n|/N as written; "sampled": prior scaled by a
    # partition estimate from the drawn negatives (see nce_loss)
    noise: str = "fixed"

    def __post_init__(self):
        if self.tau <= 0:
            raise LossConfigError(f"tau must be positive, got {self.tau}")
        if self.lam < 0:
            raise LossConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.negatives < 1 or self.dataset_size < 1:
            raise LossConfigError("negatives and dataset_size must be positive")
        if self.noise not in NOISE_MODES:
            raise LossConfigError(f"noise must be one of {NOISE_MODES}, got {self.noise!r}")

    @property
    def ratio(self) -> float:
        """|D_n| / N, the noise prior inside h."""
        return self.negatives / self.dataset_size


def _check_h_args(tau: float, ratio: float) -> None:
    if tau <= 0:
        raise LossConfigError(f"tau must be positive, got {tau}")
    if ratio <= 0:
        raise LossConfigError(f"noise ratio must be positive, got {ratio}")


def h_logit(cos: Tensor, tau: float, ratio: float) -> Tensor:
    """z such that h = sigmoid(z) = exp(cos/tau) / (exp(cos/tau) + ratio)."""
    _check_h_args(tau, ratio)
    return ops.sub(ops.mul(cos, 1.0 / tau), math.log(ratio))


def h_from_cos(cos: Tensor, tau: float, ratio: float) -> Tensor:
    return ops.sigmoid(h_logit(cos, tau, ratio))


def similarity_h(f_emb, g_emb, tau: float, ratio: float) -> Tensor:
    """exp(<f,g>/tau) / (exp(<f,g>/tau) + ratio) for unit vectors f, g."""
    f_emb, g_emb = as_tensor(f_emb), as_tensor(g_emb)
    return h_from_cos(ops.dot(f_emb, g_emb), tau, ratio)


def _neg_log(p: Tensor) -> Tensor:
    return ops.mul(ops.log(p, floor=LOG_FLOOR), -1.0)


def nce_loss(f_emb, g_emb, negatives, config: LossConfig) -> Tensor:
    """-log h(f, g) - sum_n log(1 - h(f_n, g)), averaged over the batch.

    ``negatives`` holds bank embeddings f(phi(I')) as K x d (single sample) or
    B x K x d; it may be empty or None.

    With ``config.noise == "sampled"`` the model density is normalized by the
    Monte-Carlo partition estimate Z = N * mean_n exp(<f_n, g>/tau), so every
    logit subtracts log sum_n exp(<f_n, g>/tau) instead of log(|D_n|/N).
    A fixed prior makes the all-equal embedding a global minimum whenever
    1/tau is small next to log(|D_n|); the sampled form does not.
    """
    f_emb, g_emb = as_tensor(f_emb), as_tensor(g_emb)
    single = f_emb.ndim == 1
    if single:
        f_emb = ops.reshape(f_emb, (1,) + f_emb.shape)
        g_emb = ops.reshape(g_emb, (1,) + g_emb.shape)
    b, d = f_emb.shape
    ratio = config.ratio

    has_negs = negatives is not None and np.size(negatives.data if isinstance(negatives, Tensor) else negatives)
    cos_pos = ops.dot(f_emb, g_emb)
    if not has_negs:
        return ops.mean(_neg_log(ops.sigmoid(h_logit(cos_pos, config.tau, ratio))))

    negs = as_tensor(negatives)
    if single and negs.ndim == 2:
        negs = ops.reshape(negs, (1,) + negs.shape)
    k = negs.shape[1]
    g_rep = ops.expand(ops.reshape(g_emb, (b, 1, d)), (b, k, d))
    cos_neg = ops.sum(ops.mul(negs, g_rep), axis=-1)
    if config.noise == "sampled":
        _check_h_args(config.tau, ratio)
        log_z = ops.logsumexp(ops.mul(cos_neg, 1.0 / config.tau), axis=-1)
        z_pos = ops.sub(ops.mul(cos_pos, 1.0 / config.tau), log_z)
        z_neg = ops.sub(ops.mul(cos_neg, 1.0 / config.tau), ops.expand(ops.reshape(log_z, (b, 1)), (b, k)))
    else:
        z_pos = h_logit(cos_pos, config.tau, ratio)
        z_neg = h_logit(cos_neg, config.tau, ratio)
    # 1 - sigmoid(z) == sigmoid(-z), without cancellation
    neg_terms = _neg_log(ops.sigmoid(ops.mul(z_neg, -1.0)))
    per_sample = ops.add(_neg_log(ops.sigmoid(z_pos)), ops.sum(neg_terms, axis=-1))
    return ops.mean(per_sample)


def _labels(assign, k: int, b: int) -> np.ndarray:
    """Cluster indices from integer labels or one-hot rows."""
    a = np.asarray(assign)
    if a.dtype.kind in "fb" or a.ndim == 2:
        a = a.astype(np.float64).reshape(b, -1)
        if a.shape[1] != k or not np.all((a == 0) | (a == 1)) or not np.all(a.sum(axis=1) == 1):
            raise AssignmentError(f"assignment rows must be one-hot over {k} clusters")
        return a.argmax(axis=1)
    a = a.reshape(b).astype(np.int64)
    if a.min() < 0 or a.max() >= k:
        raise AssignmentError(f"cluster index out of range [0, {k}): {a.tolist()}")
    return a


def pld_loss(
    f_emb,
    g_emb,
    image_centers: np.ndarray,
    patch_centers: np.ndarray,
    image_assign,
    patch_assign,
    config: LossConfig,
) -> Tensor:
    """Instance-group discrimination across the two paths.

    Term A classifies the patch embedding against the image-path cluster
    centers (logits h(C_k, g), softmax over k) with the image's cluster as the
    target; term B does the same for the image embedding against the
    patch-path centers. Result is 0.5 A + 0.5 B. Centers are constants.
    """
    f_emb, g_emb = as_tensor(f_emb), as_tensor(g_emb)
    if f_emb.ndim == 1:
        f_emb = ops.reshape(f_emb, (1,) + f_emb.shape)
        g_emb = ops.reshape(g_emb, (1,) + g_emb.shape)
    b = f_emb.shape[0]
    c_img = np.asarray(image_centers, dtype=np.float64)
    c_pat = np.asarray(patch_centers, dtype=np.float64)
    k = c_img.shape[0]
    if k < 2 or c_pat.shape[0] != k:
        raise AssignmentError(f"need matching center sets with k >= 2, got {c_img.shape} and {c_pat.shape}")
    lab_a = _labels(image_assign, k, b)
    lab_b = _labels(patch_assign, k, b)

    logits_a = h_from_cos(ops.matmul(g_emb, Tensor(c_img.T)), config.tau, config.ratio)
    logits_b = h_from_cos(ops.matmul(f_emb, Tensor(c_pat.T)), config.tau, config.ratio)
    term_a = ops.cross_entropy(logits_a, lab_a)
    term_b = ops.cross_entropy(logits_b, lab_b)
    return ops.add(ops.mul(term_a, 0.5), ops.mul(term_b, 0.5))


def total_loss(nce: Tensor, pld: Optional[Tensor], lam: float) -> Tensor:
    """nce + lam * pld; with lam == 0 the NCE tensor is returned untouched."""
    if lam == 0 or pld is None:
        return nce
    return ops.add(nce, ops.mul(pld, lam))
