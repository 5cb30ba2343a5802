"""Image-linking evaluation: R@1, sampled-pair AUC, and hard-negative AUC_H.

Two images link iff they carry the same branch label.  AUC is estimated from
per-anchor sampled pairs (one positive, one negative each); AUC_H replaces the
uniform negative with a draw from a mined pool of the most-similar negatives
under a fixed reference embedding.  Repeats are independent, with repeat r
seeded as seed+r, and reduced in repeat order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedstore import EmbeddingMatrix, cosine_knn


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class LinkOracle:
    """Ground-truth linking: image id → branch id."""

    labels: dict

    @classmethod
    def from_catalog(cls, catalog) -> "LinkOracle":
        return cls({rec.image_id: rec.branch_id for rec in catalog.records})

    def branch(self, image_id: str) -> str:
        try:
            return self.labels[image_id]
        except KeyError:
            raise EvalError(f"no branch label for image {image_id!r}") from None

    def link(self, a: str, b: str) -> int:
        return int(a != b and self.branch(a) == self.branch(b))


@dataclass(frozen=True, eq=False)
class PairSet:
    pairs: tuple  # (anchor_id, partner_id, link 0|1)
    seed: int
    mode: str  # "random" | "hard"
    skipped: int  # singleton-branch anchors left out entirely


@dataclass(frozen=True, eq=False)
class HardNegPool:
    negatives: dict  # anchor id -> tuple of ids, descending reference similarity
    k: int


@dataclass(frozen=True)
class EvalOptions:
    repeats: int = 10
    seed: int = 0
    hard_pool: HardNegPool | None = None
    threads: int = 1


@dataclass(frozen=True)
class MetricReport:
    r_at_1: float
    auc_mean: float
    auc_std: float
    auc_repeats: tuple
    auc_h_mean: float | None
    auc_h_std: float | None
    auc_h_repeats: tuple | None
    repeats: int
    skipped: int

    def to_json_dict(self) -> dict:
        hard = None
        if self.auc_h_mean is not None:
            hard = {"mean": self.auc_h_mean, "std": self.auc_h_std,
                    "repeats": list(self.auc_h_repeats)}
        return {
            "r_at_1": self.r_at_1,
            "auc": {"mean": self.auc_mean, "std": self.auc_std,
                    "repeats": list(self.auc_repeats)},
            "auc_h": hard,
            "skipped": self.skipped,
        }


def auroc(pos_scores, neg_scores) -> float:
    """Mann-Whitney AUROC with exact 0.5 credit for ties, via midranks."""
    pos = np.asarray(pos_scores, dtype=np.float64).reshape(-1)
    neg = np.asarray(neg_scores, dtype=np.float64).reshape(-1)
    if pos.size == 0 or neg.size == 0:
        raise EvalError("auroc needs at least one score on each side")
    scores = np.concatenate([pos, neg])
    order = np.argsort(scores, kind="mergesort")
    sv = scores[order]
    # midrank per tie group: group spanning sorted slots [s, e) gets (s+e+1)/2
    bounds = np.flatnonzero(np.r_[True, sv[1:] != sv[:-1], True])
    sizes = np.diff(bounds)
    mids = bounds[:-1] + (sizes - 1) / 2.0 + 1.0
    ranks = np.empty(scores.size, dtype=np.float64)
    ranks[order] = np.repeat(mids, sizes)
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def _branch_groups(image_ids, oracle: LinkOracle) -> dict:
    groups: dict = {}
    for image_id in image_ids:
        groups.setdefault(oracle.branch(image_id), []).append(image_id)
    return groups


def sample_eval_pairs(
    image_ids,
    oracle: LinkOracle,
    seed: int,
    hard_pool: HardNegPool | None = None,
) -> PairSet:
    """One positive and one negative pair per eligible anchor.

    Anchors are visited in sorted id order; a singleton-branch anchor is
    skipped (no positive exists) and consumes no random draws.  Negatives come
    uniformly from the other branches, or from ``hard_pool`` when given.
    """
    ids = sorted(image_ids)
    groups = _branch_groups(ids, oracle)
    if len(groups) < 2:
        raise EvalError(f"need at least 2 branches to sample negatives, got {len(groups)}")
    all_ids = np.array(ids, dtype=object)
    branch_of = {i: b for b, members in groups.items() for i in members}
    code_of = {b: j for j, b in enumerate(sorted(groups))}
    codes = np.array([code_of[branch_of[i]] for i in ids])
    negs_by_branch = {b: all_ids[codes != code_of[b]] for b in groups}
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    pairs = []
    skipped = 0
    for anchor in ids:
        b = branch_of[anchor]
        mates = [m for m in groups[b] if m != anchor]
        if not mates:
            skipped += 1
            continue
        pos = mates[int(rng.integers(len(mates)))]
        if hard_pool is None:
            candidates = negs_by_branch[b]
        else:
            pooled = hard_pool.negatives.get(anchor)
            if not pooled:
                raise EvalError(f"hard pool has no negatives for anchor {anchor!r}")
            candidates = pooled
        neg = candidates[int(rng.integers(len(candidates)))]
        pairs.append((anchor, pos, 1))
        pairs.append((anchor, neg, 0))
    return PairSet(tuple(pairs), seed, "hard" if hard_pool is not None else "random", skipped)


def mine_hard_negatives(reference: EmbeddingMatrix, oracle: LinkOracle, k: int = 10,
                        threads: int = 1) -> HardNegPool:
    """Top-k different-branch ids per image, by descending reference similarity.

    Ties break toward the lexicographically smaller id.  Pools are shorter
    than k only when fewer negatives exist; same-branch-only inputs give
    empty pools.
    """
    if k < 1:
        raise EvalError("k must be >= 1")
    ids = sorted(reference.ids)
    sub = reference.subset(ids)  # gallery in id order, so index ties == id ties
    branches = np.array([oracle.branch(i) for i in ids], dtype=object)
    n = len(ids)
    if n < 2:
        return HardNegPool({i: () for i in ids}, k)
    knn = cosine_knn(sub, sub, k=n - 1, exclude_self=True, threads=threads)
    pool = {}
    for qi, anchor in enumerate(ids):
        neigh = knn.indices[qi]
        keep = neigh[branches[neigh] != branches[qi]][:k]
        pool[anchor] = tuple(ids[j] for j in keep)
    return HardNegPool(pool, k)


def _pair_scores(unit: np.ndarray, row_of: dict, pair_set: PairSet):
    a_idx = np.array([row_of[a] for a, _, _ in pair_set.pairs], dtype=np.intp)
    b_idx = np.array([row_of[b] for _, b, _ in pair_set.pairs], dtype=np.intp)
    links = np.array([y for _, _, y in pair_set.pairs], dtype=bool)
    scores = np.einsum("ij,ij->i", unit[a_idx], unit[b_idx])
    return scores[links], scores[~links]


def evaluate(embeddings: EmbeddingMatrix, oracle: LinkOracle, options: EvalOptions) -> MetricReport:
    """R@1 plus AUC (and AUC_H when a hard pool is supplied) over repeats."""
    if options.repeats < 1:
        raise EvalError("repeats must be >= 1")
    ids = list(embeddings.ids)
    branches = [oracle.branch(i) for i in ids]
    counts: dict = {}
    for b in branches:
        counts[b] = counts.get(b, 0) + 1
    eligible = [i for i, b in enumerate(branches) if counts[b] >= 2]
    if not eligible:
        raise EvalError("every branch is a singleton; no metric is defined")

    knn = cosine_knn(embeddings, embeddings, k=1, exclude_self=True, threads=options.threads)
    hits = sum(1 for i in eligible if branches[knn.indices[i, 0]] == branches[i])
    r_at_1 = hits / len(eligible)

    data = embeddings.data.astype(np.float64)
    norms = np.linalg.norm(data, axis=1, keepdims=True)
    unit = data / np.maximum(norms, 1e-30)
    row_of = {image_id: i for i, image_id in enumerate(ids)}

    def auc_over_repeats(hard_pool):
        vals = []
        skipped = 0
        for r in range(options.repeats):
            ps = sample_eval_pairs(ids, oracle, options.seed + r, hard_pool)
            skipped = ps.skipped
            pos, neg = _pair_scores(unit, row_of, ps)
            vals.append(auroc(pos, neg))
        return vals, skipped

    auc_vals, skipped = auc_over_repeats(None)
    auc_h_vals = None
    if options.hard_pool is not None:
        auc_h_vals, _ = auc_over_repeats(options.hard_pool)

    def mean_std(vals):
        arr = np.asarray(vals, dtype=np.float64)
        return float(arr.mean()), float(arr.std())

    auc_mean, auc_std = mean_std(auc_vals)
    if auc_h_vals is None:
        h_mean = h_std = h_rep = None
    else:
        h_mean, h_std = mean_std(auc_h_vals)
        h_rep = tuple(auc_h_vals)
    return MetricReport(
        r_at_1=r_at_1,
        auc_mean=auc_mean,
        auc_std=auc_std,
        auc_repeats=tuple(auc_vals),
        auc_h_mean=h_mean,
        auc_h_std=h_std,
        auc_h_repeats=h_rep,
        repeats=options.repeats,
        skipped=skipped,
    )
