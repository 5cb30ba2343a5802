"""Desk-scale embedding-head trainer.

The head is layernorm (affine-free) -> linear projection -> L2 normalize,
trained on raw synthetic features with class-balanced m x k batches and plain
SGD with momentum.  Proxy/center banks, where a loss has them, take their own
learning rate without momentum and are re-normalized after every step.
Model selection monitors R@1 on the val_ss split.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedstore import EmbeddingMatrix
from .linkeval import EvalOptions, LinkOracle, evaluate
from .losses import (
    LOSS_KINDS,
    Batch,
    CenterBank,
    LossParams,
    ProxyBank,
    compute_loss,
)

MODEL_MAGIC = b"TOY1"


class TrainError(ValueError):
    pass


@dataclass(eq=False)
class ToyModel:
    weight: np.ndarray  # d_out x d_in
    bias: np.ndarray  # d_out
    ln_eps: float = 1e-5

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise TrainError(f"bad parameter shapes {self.weight.shape} / {self.bias.shape}")
        if self.weight.shape[0] < 2:
            raise TrainError("d_out must be >= 2")
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise TrainError("non-finite model parameters")

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "ToyModel":
        return ToyModel(self.weight.copy(), self.bias.copy(), self.ln_eps)


def init_model(d_in: int, d_out: int, seed: int, ln_eps: float = 1e-5) -> ToyModel:
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    weight = rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
    return ToyModel(weight, np.zeros(d_out), ln_eps)


def _layernorm(features: np.ndarray, eps: float) -> np.ndarray:
    mu = features.mean(axis=1, keepdims=True)
    var = features.var(axis=1, keepdims=True)
    return (features - mu) / np.sqrt(var + eps)


def forward(model: ToyModel, features: np.ndarray) -> np.ndarray:
    """Row-wise layernorm -> W.x + b -> unit normalization; output B x d_out."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.d_in:
        raise TrainError(f"features must be B x {model.d_in}, got {x.shape}")
    y = _layernorm(x, model.ln_eps) @ model.weight.T + model.bias
    nu = np.sqrt(np.sum(y * y, axis=1, keepdims=True) + 1e-12)
    return y / nu


def head_backward(model: ToyModel, features: np.ndarray, grad_embeddings: np.ndarray):
    """Gradient of the loss w.r.t. (W, b) given dL/d(normalized output)."""
    x = np.asarray(features, dtype=np.float64)
    z = _layernorm(x, model.ln_eps)
    y = z @ model.weight.T + model.bias
    nu = np.sqrt(np.sum(y * y, axis=1, keepdims=True) + 1e-12)
    g = np.asarray(grad_embeddings, dtype=np.float64)
    # h = y / nu  =>  dL/dy = g/nu - y * (y.g) / nu^3
    dy = g / nu - y * np.sum(y * g, axis=1, keepdims=True) / nu**3
    return dy.T @ z, dy.sum(axis=0)


@dataclass(frozen=True, slots=True)
class BatchSpec:
    m: int  # classes per batch
    k: int  # instances per class

    def __post_init__(self) -> None:
        if self.m < 2 or self.k < 2:
            raise TrainError(f"need m >= 2 and k >= 2, got m={self.m} k={self.k}")

    @property
    def size(self) -> int:
        return self.m * self.k


def sample_batch(image_ids, oracle: LinkOracle, spec: BatchSpec, seed: int) -> tuple:
    """m distinct classes, k images each, uniformly without replacement."""
    by_class: dict = {}
    for image_id in sorted(image_ids):
        by_class.setdefault(oracle.branch(image_id), []).append(image_id)
    eligible = sorted(b for b, members in by_class.items() if len(members) >= spec.k)
    if len(eligible) < spec.m:
        raise TrainError(
            f"need {spec.m} classes with >= {spec.k} images, only {len(eligible)} eligible"
        )
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    picked = rng.choice(len(eligible), size=spec.m, replace=False)
    out = []
    for ci in picked:
        members = by_class[eligible[int(ci)]]
        rows = rng.choice(len(members), size=spec.k, replace=False)
        out.extend(members[int(r)] for r in rows)
    return tuple(out)


@dataclass(frozen=True, slots=True)
class TrainConfig:
    loss: str = "multisim"
    params: LossParams = field(default_factory=LossParams)
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 10
    seed: int = 0
    sigma_aug: float = 0.05  # supcon view noise
    proxy_lr: float | None = None  # None -> lr
    m: int = 8
    k: int = 4
    d_out: int = 512
    steps_per_epoch: int | None = None  # None -> n_train // (m*k), at least 1
    eval_repeats: int = 3

    def validate(self) -> None:
        if self.loss not in LOSS_KINDS:
            raise TrainError(f"unknown loss {self.loss!r}")
        self.params.validate()
        if self.lr <= 0:
            raise TrainError("lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise TrainError("momentum must be in [0, 1)")
        if self.epochs < 1:
            raise TrainError("epochs must be >= 1")
        if self.sigma_aug < 0:
            raise TrainError("sigma_aug must be >= 0")
        if self.proxy_lr is not None and self.proxy_lr <= 0:
            raise TrainError("proxy_lr must be > 0")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise TrainError("steps_per_epoch must be >= 1")
        if self.eval_repeats < 1:
            raise TrainError("eval_repeats must be >= 1")
        BatchSpec(self.m, self.k)
        if self.d_out < 2:
            raise TrainError("d_out must be >= 2")


@dataclass(eq=False)
class OptimizerState:
    v_weight: np.ndarray
    v_bias: np.ndarray
    bank: ProxyBank | CenterBank | None = None

    @classmethod
    def for_model(cls, model: ToyModel, bank=None) -> "OptimizerState":
        return cls(np.zeros_like(model.weight), np.zeros_like(model.bias), bank)


def train_step(
    model: ToyModel,
    features: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    state: OptimizerState,
    rng: np.random.Generator,
) -> float:
    """One SGD step in place; returns the batch loss."""
    feats = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if config.loss == "supcon":
        # two noisy views per sample stand in for image augmentations
        feats = np.concatenate([
            feats + config.sigma_aug * rng.standard_normal(feats.shape),
            feats + config.sigma_aug * rng.standard_normal(feats.shape),
        ])
        labels = np.concatenate([labels, labels])
    emb = forward(model, feats)
    result = compute_loss(config.loss, Batch(emb, labels), config.params, state.bank)
    if not np.isfinite(result.value):
        raise TrainError(
            f"non-finite {config.loss} loss ({result.value}) on batch of {len(labels)}"
        )
    d_weight, d_bias = head_backward(model, feats, result.grad_embeddings)
    state.v_weight = config.momentum * state.v_weight + d_weight
    state.v_bias = config.momentum * state.v_bias + d_bias
    model.weight -= config.lr * state.v_weight
    model.bias -= config.lr * state.v_bias
    if state.bank is not None and result.grad_aux is not None:
        plr = config.proxy_lr if config.proxy_lr is not None else config.lr
        vec = state.bank.vectors - plr * result.grad_aux
        # proxies live on the unit sphere; renormalize after each step
        norms = np.sqrt(np.sum(vec * vec, axis=-1, keepdims=True))
        vec = vec / np.maximum(norms, 1e-12)
        state.bank = type(state.bank)(vec)
    return result.value


def _init_bank(kind: str, class_means: np.ndarray, n_centers: int, rng) -> ProxyBank | CenterBank | None:
    if kind == "proxynca":
        return ProxyBank(class_means)
    if kind == "softtriple":
        c, d = class_means.shape
        jitter = 0.01 * rng.standard_normal((c, n_centers, d))
        vec = class_means[:, None, :] + jitter
        vec /= np.sqrt(np.sum(vec * vec, axis=-1, keepdims=True))
        return CenterBank(vec)
    return None


@dataclass(eq=False)
class TrainHistory:
    rows: list  # (epoch, train_loss, val_r_at_1, val_auc)

    def save(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_r_at_1", "val_auc"])
            for row in self.rows:
                writer.writerow([row[0], f"{row[1]:.6f}", f"{row[2]:.6f}", f"{row[3]:.6f}"])


def train(catalog, assignment, features: EmbeddingMatrix, config: TrainConfig):
    """Train the head on the train split; return (best model, history).

    Best = highest val_ss R@1, earliest epoch on ties.
    """
    config.validate()
    oracle = LinkOracle.from_catalog(catalog)
    split_map = assignment.by_split()
    train_ids = sorted(split_map["train"])
    val_ids = sorted(split_map["val_ss"])
    if not train_ids:
        raise TrainError("train split is empty")
    if not val_ids:
        raise TrainError("val_ss split is empty; model selection needs it")

    row_of = {image_id: i for i, image_id in enumerate(features.ids)}
    missing = [i for i in train_ids + val_ids if i not in row_of]
    if missing:
        raise TrainError(f"features missing for {len(missing)} images, e.g. {missing[0]!r}")
    feat = features.data.astype(np.float64)

    classes = sorted({oracle.branch(i) for i in train_ids})
    class_of = {b: j for j, b in enumerate(classes)}
    means = np.zeros((len(classes), feat.shape[1]))
    counts = np.zeros(len(classes))
    for image_id in train_ids:
        j = class_of[oracle.branch(image_id)]
        means[j] += feat[row_of[image_id]]
        counts[j] += 1
    means /= counts[:, None]
    means /= np.maximum(np.sqrt(np.sum(means * means, axis=1, keepdims=True)), 1e-12)

    rng = np.random.default_rng(config.seed & 0xFFFFFFFFFFFFFFFF)
    model = init_model(feat.shape[1], config.d_out, int(rng.integers(2**63)))
    state = OptimizerState.for_model(
        model, _init_bank(config.loss, means, config.params.softtriple_centers, rng)
    )
    spec = BatchSpec(config.m, config.k)
    steps = config.steps_per_epoch or max(1, len(train_ids) // spec.size)

    val_feat = feat[[row_of[i] for i in val_ids]]
    history = TrainHistory([])
    best = model.copy()
    best_r1 = -1.0
    for epoch in range(1, config.epochs + 1):
        epoch_losses = []
        for _ in range(steps):
            ids = sample_batch(train_ids, oracle, spec, int(rng.integers(2**63)))
            batch_feat = feat[[row_of[i] for i in ids]]
            labels = np.array([class_of[oracle.branch(i)] for i in ids])
            epoch_losses.append(train_step(model, batch_feat, labels, config, state, rng))
        emb = EmbeddingMatrix(tuple(val_ids), forward(model, val_feat).astype(np.float32),
                              normalized=True)
        report = evaluate(emb, oracle, EvalOptions(repeats=config.eval_repeats,
                                                   seed=int(rng.integers(2**31))))
        history.rows.append((epoch, float(np.mean(epoch_losses)), report.r_at_1, report.auc_mean))
        if report.r_at_1 > best_r1:
            best_r1 = report.r_at_1
            best = model.copy()
    return best, history


def save_model(path, model: ToyModel) -> None:
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<II", model.d_in, model.d_out))
        fh.write(model.weight.astype("<f4").tobytes(order="C"))
        fh.write(model.bias.astype("<f4").tobytes())


def load_model(path) -> ToyModel:
    blob = Path(path).read_bytes()
    if blob[:4] != MODEL_MAGIC:
        raise TrainError(f"bad model magic {blob[:4]!r}")
    if len(blob) < 12:
        raise TrainError("truncated model header")
    d_in, d_out = struct.unpack_from("<II", blob, 4)
    expected = 12 + 4 * (d_out * d_in + d_out)
    if len(blob) != expected:
        raise TrainError(f"model size {len(blob)} != expected {expected}")
    w = np.frombuffer(blob, dtype="<f4", count=d_out * d_in, offset=12)
    b = np.frombuffer(blob, dtype="<f4", count=d_out, offset=12 + 4 * d_out * d_in)
    return ToyModel(w.reshape(d_out, d_in).astype(np.float64), b.astype(np.float64))
