"""Six deep-metric-learning loss kernels with analytic gradients.

Every kernel is a pure function of a batch (embeddings + integer labels) and
returns the scalar value together with the gradient w.r.t. the raw embedding
coordinates, plus the proxy/center gradient where one exists.  Formulations
follow the original publications:

* triplet        -- Schroff et al., FaceNet, CVPR 2015 (cosine hinge, all valid triplets)
* circle         -- Sun et al., Circle Loss, CVPR 2020
* multisim       -- Wang et al., Multi-Similarity Loss, CVPR 2019
* supcon         -- Khosla et al., Supervised Contrastive Learning, NeurIPS 2020 ("out" form)
* proxynca       -- Teh et al., ProxyNCA++, ECCV 2020 (squared Euclidean, all proxies in the softmax)
* softtriple     -- Qian et al., SoftTriple Loss, ICCV 2019

Defaults not determined by our training setup are the published ones.  All
reductions run in float64 with a fixed ascending-index order; softmax-like
sums are log-sum-exp stabilized.  Degenerate batches (no usable pair) return
exactly zero with zero gradients instead of raising.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

LOSS_KINDS = ("triplet", "circle", "multisim", "supcon", "proxynca", "softtriple")


class LossError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Batch:
    embeddings: np.ndarray  # B x d, float64
    labels: np.ndarray  # B, integer class ids

    def __post_init__(self) -> None:
        emb = np.asarray(self.embeddings, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if emb.ndim != 2 or labels.ndim != 1 or emb.shape[0] != labels.shape[0]:
            raise LossError(f"bad batch shapes {emb.shape} / {labels.shape}")
        if emb.shape[0] < 2:
            raise LossError("batch needs at least 2 rows")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]


@dataclass(frozen=True, slots=True)
class LossParams:
    triplet_margin: float = 0.1
    circle_m: float = 0.4
    circle_gamma: float = 80.0
    multisim_alpha: float = 2.0
    multisim_beta: float = 50.0
    multisim_lambda: float = 1.0
    multisim_epsilon: float = 0.1
    supcon_tau: float = 0.05
    proxynca_temperature: float = 1.0 / 9.0
    softtriple_lambda: float = 20.0
    softtriple_gamma: float = 0.1
    softtriple_delta: float = 0.01
    softtriple_tau_reg: float = 0.2
    softtriple_centers: int = 5

    def validate(self) -> None:
        for name in ("circle_gamma", "multisim_alpha", "multisim_beta", "supcon_tau",
                     "proxynca_temperature", "softtriple_lambda", "softtriple_gamma"):
            if getattr(self, name) <= 0.0:
                raise LossError(f"{name} must be > 0")
        if self.triplet_margin < 0.0:
            raise LossError("triplet_margin must be >= 0")
        if self.softtriple_centers < 1:
            raise LossError("softtriple_centers must be >= 1")

    def to_json_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_json(cls, path: str | Path) -> "LossParams":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        known = {f.name for f in fields(cls)}
        bad = sorted(set(payload) - known)
        if bad:
            raise LossError(f"unknown loss parameter(s): {bad}")
        params = replace(cls(), **payload)
        params.validate()
        return params


@dataclass(frozen=True, eq=False)
class LossResult:
    value: float
    grad_embeddings: np.ndarray
    grad_aux: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class ProxyBank:
    vectors: np.ndarray  # C x d, one proxy per class

    def __post_init__(self) -> None:
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise LossError("proxy bank must be C x d")
        object.__setattr__(self, "vectors", v)


@dataclass(frozen=True, eq=False)
class CenterBank:
    vectors: np.ndarray  # C x J x d, J centers per class

    def __post_init__(self) -> None:
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 3:
            raise LossError("center bank must be C x J x d")
        object.__setattr__(self, "vectors", v)


def _zero(batch: Batch, aux_shape: tuple[int, ...] | None = None) -> LossResult:
    aux = np.zeros(aux_shape) if aux_shape is not None else None
    return LossResult(0.0, np.zeros_like(batch.embeddings), aux)


def _masks(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(labels.shape[0], dtype=bool)
    return same & off, (~same) & off


def _log1p_sumexp(values: np.ndarray) -> tuple[float, np.ndarray]:
    """Stable log(1 + sum(exp(v))) and the weights exp(v)/(1+sum(exp(v)))."""
    if values.size == 0:
        return 0.0, values
    m = max(0.0, float(np.max(values)))
    ex = np.exp(values - m)
    denom = np.exp(-m) + float(np.sum(ex))
    return m + np.log(denom), ex / denom


def _masked_lse(row: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Log-sum-exp over row[mask], plus full-size softmax weights (zeros off-mask)."""
    vals = row[mask]
    m = float(np.max(vals))
    ex = np.exp(vals - m)
    total = float(np.sum(ex))
    weights = np.zeros_like(row)
    weights[mask] = ex / total
    return m + np.log(total), weights


def triplet_loss(batch: Batch, params: LossParams) -> LossResult:
    """Hinge over every valid (anchor, positive, negative) triplet, averaged."""
    emb, labels = batch.embeddings, batch.labels
    pos, neg = _masks(labels)
    s = emb @ emb.T
    # h[i, p, n] = s_an - s_ap + margin
    h = s[:, None, :] - s[:, :, None] + params.triplet_margin
    valid = pos[:, :, None] & neg[:, None, :]
    count = int(valid.sum())
    if count == 0:
        return _zero(batch)
    active = valid & (h > 0.0)
    value = float(np.sum(np.where(active, h, 0.0))) / count
    g = np.zeros_like(s)
    g += active.sum(axis=1) / count  # d/ds_an
    g -= active.sum(axis=2) / count  # d/ds_ap
    grad = (g + g.T) @ emb
    return LossResult(value, grad)


def circle_loss(batch: Batch, params: LossParams) -> LossResult:
    emb, labels = batch.embeddings, batch.labels
    m, gamma = params.circle_m, params.circle_gamma
    pos, neg = _masks(labels)
    s = emb @ emb.T
    b = batch.size

    # weighted logits; the weights are part of the function, not detached
    a_n = gamma * np.maximum(0.0, s + m) * (s - m)
    a_p = -gamma * np.maximum(0.0, 1.0 + m - s) * (s - (1.0 - m))
    da_n = np.where(s + m > 0.0, 2.0 * gamma * s, 0.0)
    da_p = np.where(1.0 + m - s > 0.0, 2.0 * gamma * (s - 1.0), 0.0)

    value = 0.0
    g = np.zeros_like(s)
    for i in range(b):
        if not (pos[i].any() and neg[i].any()):
            continue
        lse_n, w_n = _masked_lse(a_n[i], neg[i])
        lse_p, w_p = _masked_lse(a_p[i], pos[i])
        t = lse_n + lse_p
        # softplus(t) = log(1 + sum_n sum_p exp(a_n + a_p))
        value += np.logaddexp(0.0, t)
        sg = 1.0 / (1.0 + np.exp(-t))
        g[i] += sg * (w_n * da_n[i] + w_p * da_p[i])
    value /= b
    g /= b
    grad = (g + g.T) @ emb
    return LossResult(float(value), grad)


def multisim_loss(batch: Batch, params: LossParams) -> LossResult:
    emb, labels = batch.embeddings, batch.labels
    alpha, beta = params.multisim_alpha, params.multisim_beta
    lam, eps = params.multisim_lambda, params.multisim_epsilon
    pos, neg = _masks(labels)
    s = emb @ emb.T
    b = batch.size

    per_anchor: list[float] = []
    g = np.zeros_like(s)
    g_rows: list[int] = []
    for i in range(b):
        if not (pos[i].any() and neg[i].any()):
            continue
        min_pos = float(np.min(s[i][pos[i]]))
        max_neg = float(np.max(s[i][neg[i]]))
        keep_n = neg[i] & (s[i] > min_pos - eps)
        keep_p = pos[i] & (s[i] < max_neg + eps)
        if not (keep_n.any() or keep_p.any()):
            continue
        row = 0.0
        if keep_p.any():
            x_p = -alpha * (s[i][keep_p] - lam)
            lp, w_p = _log1p_sumexp(x_p)
            row += lp / alpha
            g[i][keep_p] += -w_p
        if keep_n.any():
            x_n = beta * (s[i][keep_n] - lam)
            ln, w_n = _log1p_sumexp(x_n)
            row += ln / beta
            g[i][keep_n] += w_n
        per_anchor.append(row)
        g_rows.append(i)
    if not per_anchor:
        return _zero(batch)
    m_count = len(per_anchor)
    value = float(np.sum(per_anchor)) / m_count
    g /= m_count
    grad = (g + g.T) @ emb
    return LossResult(value, grad)


def supcon_loss(batch: Batch, params: LossParams) -> LossResult:
    """Supervised contrastive loss on an already-materialized multiview batch."""
    emb, labels = batch.embeddings, batch.labels
    tau = params.supcon_tau
    pos, _ = _masks(labels)
    off = ~np.eye(batch.size, dtype=bool)
    s = (emb @ emb.T) / tau

    eligible = [i for i in range(batch.size) if pos[i].any()]
    if not eligible:
        return _zero(batch)
    m_count = len(eligible)
    value = 0.0
    g = np.zeros_like(s)
    for i in eligible:
        lse, w = _masked_lse(s[i], off[i])
        p_count = int(pos[i].sum())
        value += -(float(np.sum(s[i][pos[i]])) - p_count * lse) / p_count
        g[i] += w - pos[i] / p_count
    value /= m_count
    g /= m_count * tau
    grad = (g + g.T) @ emb
    return LossResult(float(value), grad)


def proxynca_loss(batch: Batch, proxies: ProxyBank, params: LossParams) -> LossResult:
    emb, labels = batch.embeddings, batch.labels
    p = proxies.vectors
    if emb.shape[1] != p.shape[1]:
        raise LossError(f"embedding d={emb.shape[1]} vs proxy d={p.shape[1]}")
    n_classes = p.shape[0]
    if labels.min() < 0 or labels.max() >= n_classes:
        missing = sorted(set(labels.tolist()) - set(range(n_classes)))
        raise LossError(f"missing proxy for label(s) {missing}")
    t = params.proxynca_temperature
    b = batch.size

    diff = emb[:, None, :] - p[None, :, :]  # B x C x d
    d2 = np.sum(diff * diff, axis=2)
    logits = -d2 / t
    shift = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shift)
    softmax = ex / ex.sum(axis=1, keepdims=True)
    logp = shift[np.arange(b), labels] - np.log(ex.sum(axis=1))
    value = float(-np.mean(logp))

    onehot = np.zeros_like(logits)
    onehot[np.arange(b), labels] = 1.0
    dd2 = -(softmax - onehot) / (t * b)
    grad_emb = 2.0 * np.einsum("ic,icd->id", dd2, diff)
    grad_prox = -2.0 * np.einsum("ic,icd->cd", dd2, diff)
    return LossResult(value, grad_emb, grad_prox)


def softtriple_loss(batch: Batch, centers: CenterBank, params: LossParams) -> LossResult:
    emb, labels = batch.embeddings, batch.labels
    w = centers.vectors  # C x J x d
    if emb.shape[1] != w.shape[2]:
        raise LossError(f"embedding d={emb.shape[1]} vs center d={w.shape[2]}")
    n_classes, n_centers = w.shape[0], w.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        missing = sorted(set(labels.tolist()) - set(range(n_classes)))
        raise LossError(f"missing centers for label(s) {missing}")
    lam, gamma = params.softtriple_lambda, params.softtriple_gamma
    delta, tau_reg = params.softtriple_delta, params.softtriple_tau_reg
    b = batch.size

    q = np.einsum("id,cjd->icj", emb, w)
    qs = q / gamma
    qs -= qs.max(axis=2, keepdims=True)
    r = np.exp(qs)
    r /= r.sum(axis=2, keepdims=True)
    sim = np.sum(r * q, axis=2)  # relaxed per-class similarity

    z = lam * sim
    rows = np.arange(b)
    z[rows, labels] -= lam * delta
    zshift = z - z.max(axis=1, keepdims=True)
    ez = np.exp(zshift)
    softmax = ez / ez.sum(axis=1, keepdims=True)
    logp = zshift[rows, labels] - np.log(ez.sum(axis=1))
    value = float(-np.mean(logp))

    onehot = np.zeros_like(z)
    onehot[rows, labels] = 1.0
    dz = (softmax - onehot) / b
    dsim = lam * dz
    dq = dsim[:, :, None] * r * (1.0 + (q - sim[:, :, None]) / gamma)
    grad_emb = np.einsum("icj,cjd->id", dq, w)
    grad_w = np.einsum("icj,id->cjd", dq, emb)

    if n_centers >= 2 and tau_reg != 0.0:
        denom = n_classes * n_centers * (n_centers - 1)
        reg = 0.0
        for j in range(n_centers):
            for jj in range(j + 1, n_centers):
                dots = np.einsum("cd,cd->c", w[:, j, :], w[:, jj, :])
                chord = np.sqrt(np.maximum(2.0 - 2.0 * dots, 1e-30))
                reg += float(np.sum(chord))
                coef = -tau_reg / (denom * chord)  # d sqrt(2-2t)/dt = -1/sqrt(2-2t)
                grad_w[:, j, :] += coef[:, None] * w[:, jj, :]
                grad_w[:, jj, :] += coef[:, None] * w[:, j, :]
        value += tau_reg * reg / denom

    return LossResult(value, grad_emb, grad_w)


def compute_loss(
    kind: str,
    batch: Batch,
    params: LossParams,
    bank: ProxyBank | CenterBank | None = None,
) -> LossResult:
    """Dispatch by lowercase loss token."""
    if kind == "triplet":
        return triplet_loss(batch, params)
    if kind == "circle":
        return circle_loss(batch, params)
    if kind == "multisim":
        return multisim_loss(batch, params)
    if kind == "supcon":
        return supcon_loss(batch, params)
    if kind == "proxynca":
        if not isinstance(bank, ProxyBank):
            raise LossError("proxynca needs a ProxyBank")
        return proxynca_loss(batch, bank, params)
    if kind == "softtriple":
        if not isinstance(bank, CenterBank):
            raise LossError("softtriple needs a CenterBank")
        return softtriple_loss(batch, bank, params)
    raise LossError(f"unknown loss kind {kind!r}")


# -- finite-difference verification --------------------------------------


def _kink_distance(kind: str, batch: Batch, params: LossParams, bank) -> float:
    """Distance (in similarity units) to the nearest non-smooth point."""
    emb, labels = batch.embeddings, batch.labels
    pos, neg = _masks(labels)
    s = emb @ emb.T
    dist = np.inf
    if kind == "triplet":
        h = s[:, None, :] - s[:, :, None] + params.triplet_margin
        valid = pos[:, :, None] & neg[:, None, :]
        if valid.any():
            dist = float(np.min(np.abs(h[valid])))
    elif kind == "circle":
        if neg.any():
            dist = float(np.min(np.abs(s[neg] + params.circle_m)))
    elif kind == "multisim":
        eps = params.multisim_epsilon
        for i in range(batch.size):
            if not (pos[i].any() and neg[i].any()):
                continue
            min_pos = float(np.min(s[i][pos[i]]))
            max_neg = float(np.max(s[i][neg[i]]))
            dist = min(dist, float(np.min(np.abs(s[i][neg[i]] - (min_pos - eps)))))
            dist = min(dist, float(np.min(np.abs(s[i][pos[i]] - (max_neg + eps)))))
    elif kind == "softtriple" and isinstance(bank, CenterBank) and bank.vectors.shape[1] >= 2:
        w = bank.vectors
        worst = 0.05  # sqrt(2-2t) below this makes the regularizer too curved to difference
        for j in range(w.shape[1]):
            for jj in range(j + 1, w.shape[1]):
                dots = np.einsum("cd,cd->c", w[:, j, :], w[:, jj, :])
                chord = float(np.min(np.sqrt(np.maximum(2.0 - 2.0 * dots, 0.0))))
                if chord < worst:
                    return 0.0
    return dist


def _unit(rows: np.ndarray) -> np.ndarray:
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def finite_diff_check(
    kind: str,
    batch: Batch,
    params: LossParams,
    eps: float = 1e-5,
    bank: ProxyBank | CenterBank | None = None,
    rng: np.random.Generator | None = None,
    max_resamples: int = 50,
) -> float:
    """Relative error between analytic and central-difference gradients.

    The embedding and aux surfaces form one flat gradient vector; the report
    is max|analytic - numeric| / max(1e-12, max|numeric|), i.e. the largest
    coordinate discrepancy measured against the gradient's own scale.  (A
    per-coordinate quotient would demand more absolute precision than the
    float64 difference quotient can deliver on near-zero coordinates.)
    Batches (and banks) sitting closer to a hinge/mining kink than the
    difference step can resolve are redrawn from ``rng`` first.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    window = max(1e-6, 4.0 * eps)
    for _ in range(max_resamples):
        if _kink_distance(kind, batch, params, bank) >= window:
            break
        fresh = _unit(rng.standard_normal(batch.embeddings.shape))
        batch = Batch(fresh, batch.labels)
        if isinstance(bank, ProxyBank):
            bank = ProxyBank(_unit(rng.standard_normal(bank.vectors.shape)))
        elif isinstance(bank, CenterBank):
            c, j, d = bank.vectors.shape
            bank = CenterBank(_unit(rng.standard_normal((c * j, d))).reshape(c, j, d))

    result = compute_loss(kind, batch, params, bank)

    def value_at(emb: np.ndarray, aux: np.ndarray | None) -> float:
        local_bank = bank
        if aux is not None and isinstance(bank, ProxyBank):
            local_bank = ProxyBank(aux)
        elif aux is not None and isinstance(bank, CenterBank):
            local_bank = CenterBank(aux)
        return compute_loss(kind, Batch(emb, batch.labels), params, local_bank).value

    def sweep(base: np.ndarray, is_aux: bool) -> np.ndarray:
        flat = base.reshape(-1)
        numeric = np.empty_like(flat)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = value_at(batch.embeddings, base) if is_aux else value_at(base, None)
            flat[idx] = orig - eps
            down = value_at(batch.embeddings, base) if is_aux else value_at(base, None)
            flat[idx] = orig
            numeric[idx] = (up - down) / (2.0 * eps)
        return numeric

    analytic = [result.grad_embeddings.reshape(-1)]
    numeric = [sweep(batch.embeddings.copy(), False)]
    if bank is not None and result.grad_aux is not None:
        analytic.append(result.grad_aux.reshape(-1))
        numeric.append(sweep(bank.vectors.copy(), True))
    a = np.concatenate(analytic)
    n = np.concatenate(numeric)
    return float(np.max(np.abs(a - n)) / max(1e-12, float(np.max(np.abs(n)))))
