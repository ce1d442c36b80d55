"""Training loops: self-supervised pretext stage, supervised fine-tuning and
the from-scratch baseline."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import ops
from .clustering import ClusterModel, refresh_clusters
from .encoder import (
    EncoderConfig,
    EncoderParams,
    encode_image,
    encode_patches,
    init_params,
    project_f,
    project_g,
)
from .jigsaw import jigsaw_batch
from .losses import LossConfig, nce_loss, pld_loss, total_loss
from .memory_bank import EmbeddingBank
from .metrics import MetricsReport, evaluate_predictions
from .tensor import Tensor, backward, parameter

log = logging.getLogger(__name__)

STAGES = ("pretext", "finetune", "baseline")


class TrainingError(RuntimeError):
    pass


class NonFiniteGradientError(TrainingError):
    pass


@dataclass
class TrainConfig:
    stage: str = "pretext"
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    lr_decay_factor: float = 1.0
    lr_decay_every: int = 30
    stop_min_delta: float = 1e-6
    stop_patience: int = 0  # 0 disables early stopping
    momentum: float = 0.0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    clusters: int = 3
    cluster_restarts: int = 20
    bank_momentum: float = 0.5
    hflip: bool = False
    freeze_backbone: bool = False
    n_classes: int = 3

    def __post_init__(self):
        if self.stage not in STAGES:
            raise TrainingError(f"unknown stage {self.stage!r}, expected one of {STAGES}")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise TrainingError("batch_size must be >= 1 and max_epochs >= 0")


def pretext_defaults(**overrides) -> TrainConfig:
    base = dict(stage="pretext", lr=1e-3, batch_size=32, max_epochs=200)
    base.update(overrides)
    return TrainConfig(**base)


def finetune_defaults(**overrides) -> TrainConfig:
    base = dict(
        stage="finetune",
        lr=1e-4,
        batch_size=32,
        max_epochs=200,
        lr_decay_factor=0.9,
        lr_decay_every=30,
        stop_min_delta=1e-6,
        stop_patience=20,
    )
    base.update(overrides)
    return TrainConfig(**base)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Step decay: lr0 * factor ** floor(epoch / every)."""
    return config.lr * config.lr_decay_factor ** (epoch // config.lr_decay_every)


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without an improvement
    strictly larger than ``min_delta`` over the best loss so far."""

    def __init__(self, min_delta: float, patience: int):
        self.min_delta = min_delta
        self.patience = patience
        self.best = float("inf")
        self.wait = 0

    def update(self, loss: float) -> bool:
        if self.best - loss > self.min_delta:
            self.best = loss
            self.wait = 0
            return False
        self.wait += 1
        return self.patience > 0 and self.wait >= self.patience


# ---------------------------------------------------------------------------
# history
# ---------------------------------------------------------------------------
@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    seconds: float
    val_loss: Optional[float] = None


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)
    stop_reason: str = "max-epochs"
    best_epoch: int = -1

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.records]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["epoch", "loss", "lr", "seconds"])
            for r in self.records:
                wr.writerow([r.epoch, repr(r.loss), repr(r.lr), f"{r.seconds:.3f}"])

    def to_dict(self) -> dict:
        return {
            "stop_reason": self.stop_reason,
            "best_epoch": self.best_epoch,
            "epochs": [asdict(r) for r in self.records],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------
def sgd_step(
    params: Sequence[Tensor],
    grads: Optional[Sequence[Optional[np.ndarray]]],
    lr: float,
    momentum: float = 0.0,
    velocity: Optional[Dict[int, np.ndarray]] = None,
) -> None:
    """p <- p - lr * g (heavy-ball momentum only when ``momentum`` > 0).

    ``grads`` defaults to each tensor's ``.grad``; tensors without a gradient
    are left alone. A non-finite gradient aborts before anything is updated.
    """
    params = list(params)
    grads = [p.grad for p in params] if grads is None else list(grads)
    if len(grads) != len(params):
        raise TrainingError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.shape:
            raise TrainingError(f"gradient shape {g.shape} != parameter {p.name or p.id} shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in tensor {p.name or p.id}")
    for p, g in zip(params, grads):
        if g is None:
            continue
        if momentum:
            v = velocity.setdefault(p.id, np.zeros_like(g))
            v *= momentum
            v += g
            g = v
        p.data -= lr * g


def _batches(order: np.ndarray, size: int) -> Iterable[np.ndarray]:
    for start in range(0, len(order), size):
        yield order[start:start + size]


# ---------------------------------------------------------------------------
# pretext stage
# ---------------------------------------------------------------------------
@dataclass
class PretextResult:
    state: Dict[str, np.ndarray]
    history: TrainHistory
    params: EncoderParams
    image_bank: EmbeddingBank
    patch_bank: EmbeddingBank
    image_clusters: Optional[ClusterModel] = None
    patch_clusters: Optional[ClusterModel] = None
    pld_calls: int = 0


def _pretext_state(params, image_bank, patch_bank, clusters) -> Dict[str, np.ndarray]:
    state = params.state()
    state.update(image_bank.state("bank.image"))
    state.update(patch_bank.state("bank.patch"))
    if clusters is not None:
        state.update(clusters[0].state("clusters.image"))
        state.update(clusters[1].state("clusters.patch"))
    return state


def pretext_train(config: TrainConfig, images: np.ndarray, epoch_callback=None) -> PretextResult:
    """Minimize NCE + lambda * PLD over jigsaw views of ``images`` (N x 3 x H x W).

    Per epoch: refresh k-means on both banks (once they hold >= 10k
    initialized rows and lambda > 0), then for each shuffled mini-batch
    forward both paths, step SGD, and fold the fresh embeddings into the
    banks. The returned state is taken at the lowest epoch loss among epochs
    that started with fully initialized banks (the first epoch's loss is
    computed against a partial negative pool and is not comparable).
    """
    n = len(images)
    if n == 0:
        raise TrainingError("pretext training needs a non-empty dataset")
    enc = config.encoder
    loss_cfg = replace(config.loss, dataset_size=n)
    k = config.clusters
    params = init_params(enc, config.seed)
    image_bank = EmbeddingBank(n, enc.embed_dim, config.bank_momentum, "image", config.seed + 1)
    patch_bank = EmbeddingBank(n, enc.embed_dim, config.bank_momentum, "patch", config.seed + 2)
    rng = np.random.default_rng(config.seed)
    tensors = list(params)
    velocity: Dict[int, np.ndarray] = {}

    history = TrainHistory()
    best_loss, best_state = float("inf"), None
    clusters = None
    pld_calls = 0

    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        lr = lr_at(config, epoch)
        banks_full = image_bank.n_initialized == n and patch_bank.n_initialized == n
        clusters = None
        min_live = min(image_bank.n_initialized, patch_bank.n_initialized)
        if loss_cfg.lam > 0 and min_live >= 10 * k:
            clusters = refresh_clusters(image_bank, patch_bank, k, rng, config.cluster_restarts)

        total, count = 0.0, 0
        for batch in _batches(rng.permutation(n), config.batch_size):
            imgs = images[batch]
            if config.hflip:
                flip = rng.random(len(batch)) < 0.5
                imgs = np.where(flip[:, None, None, None], imgs[..., ::-1], imgs)
            patches, _ = jigsaw_batch(imgs, rng, enc.grid)

            params.zero_grad()
            f = project_f(params, encode_image(params, imgs))
            g = project_g(params, encode_patches(params, patches))
            n_neg = min(loss_cfg.negatives, image_bank.n_initialized - 1)
            negs = image_bank.sample_negatives_batch(batch, n_neg, rng) if n_neg > 0 else None
            loss = nce_loss(f, g, negs, loss_cfg)
            if clusters is not None:
                pld = pld_loss(
                    f, g,
                    clusters[0].centers, clusters[1].centers,
                    clusters[0].assignments[batch], clusters[1].assignments[batch],
                    loss_cfg,
                )
                pld_calls += 1
                loss = total_loss(loss, pld, loss_cfg.lam)
            backward(loss)
            sgd_step(tensors, None, lr, config.momentum, velocity)

            image_bank.update_ema(batch, f.data)
            patch_bank.update_ema(batch, g.data)
            total += loss.item() * len(batch)
            count += len(batch)

        mean_loss = total / count
        history.records.append(EpochRecord(epoch, mean_loss, lr, time.perf_counter() - t0))
        log.info("pretext epoch %d loss %.6f lr %.2e", epoch, mean_loss, lr)
        if epoch_callback is not None:
            epoch_callback(history.records[-1])
        if banks_full and mean_loss < best_loss:
            best_loss = mean_loss
            best_state = _pretext_state(params, image_bank, patch_bank, clusters)
            history.best_epoch = epoch

    if best_state is None:
        best_state = _pretext_state(params, image_bank, patch_bank, clusters)
    return PretextResult(
        best_state, history, params, image_bank, patch_bank,
        clusters[0] if clusters else None, clusters[1] if clusters else None, pld_calls,
    )


# ---------------------------------------------------------------------------
# supervised stages
# ---------------------------------------------------------------------------
CLS_W, CLS_B = "cls.w", "cls.b"


@dataclass
class Classifier:
    params: EncoderParams
    weight: Tensor
    bias: Tensor

    @property
    def trainable(self) -> List[Tensor]:
        return [self.params[n] for n in self.params.backbone_names()] + [self.weight, self.bias]

    def state(self) -> Dict[str, np.ndarray]:
        state = {n: self.params[n].data.copy() for n in self.params.backbone_names()}
        state[CLS_W] = self.weight.data.copy()
        state[CLS_B] = self.bias.data.copy()
        return state

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        from .checkpoint import CheckpointError

        self.params.load_state(state, self.params.backbone_names())
        for name, t in ((CLS_W, self.weight), (CLS_B, self.bias)):
            if name not in state:
                raise CheckpointError(f"checkpoint is missing tensor {name!r}")
            if state[name].shape != t.shape:
                raise CheckpointError(f"tensor {name!r}: checkpoint shape {state[name].shape} != {t.shape}")
            t.data = np.array(state[name], dtype=np.float64)

    def logits(self, images: np.ndarray) -> Tensor:
        return ops.linear(encode_image(self.params, images), self.weight, self.bias)


def build_classifier(config: TrainConfig, pretrained: Optional[Dict[str, np.ndarray]] = None) -> Classifier:
    """Backbone from ``init_params`` (optionally overwritten by a pretrained
    checkpoint) plus a fresh linear head whose init depends only on the seed."""
    params = init_params(config.encoder, config.seed)
    if pretrained is not None:
        params.load_state(pretrained, params.backbone_names())
    rng = np.random.default_rng((config.seed, 31337))
    feat = config.encoder.feature_dim
    w = parameter(rng.normal(0.0, np.sqrt(2.0 / feat), size=(feat, config.n_classes)), CLS_W)
    b = parameter(np.zeros(config.n_classes), CLS_B)
    return Classifier(params, w, b)


def predict_proba(clf: Classifier, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        logits = clf.logits(images[start:start + batch_size]).data
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        out.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(out)


def _mean_ce(clf: Classifier, images: np.ndarray, labels: np.ndarray, batch_size: int = 128) -> float:
    p = predict_proba(clf, images, batch_size)
    return float(-np.mean(np.log(np.maximum(p[np.arange(len(labels)), labels], 1e-300))))


@dataclass
class FinetuneResult:
    state: Dict[str, np.ndarray]
    history: TrainHistory
    classifier: Classifier
    initial_head: Dict[str, np.ndarray]


def finetune(
    config: TrainConfig,
    pretrained: Optional[Dict[str, np.ndarray]],
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: Optional[np.ndarray] = None,
    val_y: Optional[np.ndarray] = None,
    epoch_callback=None,
) -> FinetuneResult:
    """Cross-entropy training of backbone + linear head with step-decayed SGD.

    Early stopping watches the validation loss when a validation split is
    given, otherwise the training loss; the returned state is the one with the
    lowest watched loss.
    """
    if len(train_x) == 0:
        raise TrainingError("fine-tuning needs labeled training data")
    clf = build_classifier(config, pretrained)
    initial_head = {CLS_W: clf.weight.data.copy(), CLS_B: clf.bias.data.copy()}
    trainable = [clf.weight, clf.bias] if config.freeze_backbone else clf.trainable
    rng = np.random.default_rng((config.seed, 4242))
    stopper = EarlyStopping(config.stop_min_delta, config.stop_patience)
    history = TrainHistory()
    velocity: Dict[int, np.ndarray] = {}
    best_watch, best_state = float("inf"), clf.state()
    feats = None
    if config.freeze_backbone:
        feats = np.concatenate(
            [encode_image(clf.params, train_x[s:s + 128]).data for s in range(0, len(train_x), 128)]
        )

    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        lr = lr_at(config, epoch)
        total = 0.0
        for batch in _batches(rng.permutation(len(train_x)), config.batch_size):
            for t in trainable:
                t.grad = None
            if feats is not None:
                logits = ops.linear(Tensor(feats[batch]), clf.weight, clf.bias)
            else:
                logits = clf.logits(train_x[batch])
            loss = ops.cross_entropy(logits, train_y[batch])
            backward(loss)
            sgd_step(trainable, None, lr, config.momentum, velocity)
            total += loss.item() * len(batch)
        train_loss = total / len(train_x)
        val_loss = _mean_ce(clf, val_x, val_y) if val_x is not None and len(val_x) else None
        history.records.append(EpochRecord(epoch, train_loss, lr, time.perf_counter() - t0, val_loss))
        if epoch_callback is not None:
            epoch_callback(history.records[-1])
        watched = val_loss if val_loss is not None else train_loss
        if watched < best_watch:
            best_watch, best_state = watched, clf.state()
            history.best_epoch = epoch
        if stopper.update(watched):
            history.stop_reason = "early-stop"
            break
    clf.load_state(best_state)
    return FinetuneResult(best_state, history, clf, initial_head)


def supervised_baseline_train(config: TrainConfig, train_x, train_y, val_x=None, val_y=None, **kw) -> FinetuneResult:
    """Same protocol as :func:`finetune`, starting from random initialization."""
    return finetune(replace(config, stage="baseline"), None, train_x, train_y, val_x, val_y, **kw)


def evaluate_classifier(clf: Classifier, images: np.ndarray, labels: np.ndarray) -> MetricsReport:
    return evaluate_predictions(predict_proba(clf, images), labels)


def load_classifier(config: TrainConfig, state: Dict[str, np.ndarray]) -> Classifier:
    clf = build_classifier(config)
    clf.load_state(state)
    return clf
