"""Image catalogs with a branch (class) / chain (super-class) hierarchy.

A catalog is the universe of image ids, each belonging to exactly one branch;
branches optionally belong to a chain.  A branch whose chain is not known is an
"unknown-chain" branch.  Catalogs are immutable after construction.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path


class CatalogError(ValueError):
    pass


CSV_HEADER = ("image_id", "branch_id", "chain_id", "content_key")


@dataclass(frozen=True, slots=True)
class ImageRecord:
    image_id: str
    branch_id: str
    chain_id: str | None = None
    content_key: str | None = None
    feature_ref: int | None = None


@dataclass(frozen=True)
class Catalog:
    records: tuple[ImageRecord, ...]
    branch_index: dict[str, tuple[str, ...]] = field(compare=False)
    chain_index: dict[str, tuple[str, ...]] = field(compare=False)
    unknown_branches: frozenset[str] = field(compare=False)

    @classmethod
    def from_records(cls, records: list[ImageRecord] | tuple[ImageRecord, ...]) -> "Catalog":
        seen_ids: set[str] = set()
        branch_images: dict[str, list[str]] = {}
        branch_chain: dict[str, str | None] = {}
        for rec in records:
            if rec.image_id in seen_ids:
                raise CatalogError(f"duplicate image_id: {rec.image_id!r}")
            seen_ids.add(rec.image_id)
            branch_images.setdefault(rec.branch_id, []).append(rec.image_id)
            if rec.branch_id in branch_chain:
                if branch_chain[rec.branch_id] != rec.chain_id:
                    raise CatalogError(
                        f"branch {rec.branch_id!r} has conflicting chain ids: "
                        f"{branch_chain[rec.branch_id]!r} vs {rec.chain_id!r}"
                    )
            else:
                branch_chain[rec.branch_id] = rec.chain_id
        chain_branches: dict[str, list[str]] = {}
        unknown: set[str] = set()
        for branch in sorted(branch_images):
            chain = branch_chain[branch]
            if chain is None:
                unknown.add(branch)
            else:
                chain_branches.setdefault(chain, []).append(branch)
        return cls(
            records=tuple(records),
            branch_index={b: tuple(ids) for b, ids in sorted(branch_images.items())},
            chain_index={c: tuple(bs) for c, bs in sorted(chain_branches.items())},
            unknown_branches=frozenset(unknown),
        )

    # -- derived views ----------------------------------------------------

    def image_ids(self) -> tuple[str, ...]:
        return tuple(r.image_id for r in self.records)

    def branch_of(self) -> dict[str, str]:
        return {r.image_id: r.branch_id for r in self.records}

    def branch_chain_map(self) -> dict[str, str | None]:
        out: dict[str, str | None] = {}
        for rec in self.records:
            out.setdefault(rec.branch_id, rec.chain_id)
        return out

    def known_chains(self) -> tuple[str, ...]:
        return tuple(sorted(self.chain_index))

    def unknown_images(self) -> frozenset[str]:
        return frozenset(i for b in self.unknown_branches for i in self.branch_index[b])


@dataclass(frozen=True, slots=True)
class CatalogStats:
    images: int
    branches: int
    chains: int
    branch_size_histogram: dict[int, int]

    def to_json_dict(self) -> dict:
        return {
            "images": self.images,
            "branches": self.branches,
            "chains": self.chains,
            "branch_size_histogram": {str(k): v for k, v in sorted(self.branch_size_histogram.items())},
        }


@dataclass(frozen=True, slots=True)
class DedupReport:
    merged_groups: tuple[tuple[str, ...], ...]
    dropped: tuple[str, ...]
    skipped: tuple[dict, ...]

    def to_json_dict(self) -> dict:
        return {
            "merged_groups": [list(g) for g in self.merged_groups],
            "dropped": list(self.dropped),
            "skipped": list(self.skipped),
        }


def load_catalog(path: str | Path) -> Catalog:
    """Read a catalog CSV (header ``image_id,branch_id,chain_id,content_key``)."""
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise CatalogError(f"{path}: missing header") from None
        header = [h.strip() for h in header]
        if len(header) < 2 or tuple(header) != CSV_HEADER[: len(header)]:
            raise CatalogError(f"{path}: bad header {header!r}, expected prefix of {','.join(CSV_HEADER)}")
        records: list[ImageRecord] = []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) > 4:
                raise CatalogError(f"{path}:{lineno}: too many columns")
            row = list(row) + [""] * (4 - len(row))
            image_id, branch_id, chain_id, content_key = (c.strip() for c in row)
            if not image_id or not branch_id:
                raise CatalogError(f"{path}:{lineno}: image_id and branch_id are required")
            records.append(
                ImageRecord(
                    image_id=image_id,
                    branch_id=branch_id,
                    chain_id=chain_id or None,
                    content_key=content_key or None,
                )
            )
    return Catalog.from_records(records)


def save_catalog(catalog: Catalog, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for rec in catalog.records:
            writer.writerow([rec.image_id, rec.branch_id, rec.chain_id or "", rec.content_key or ""])


class _UnionFind:
    def __init__(self) -> None:
        self.parent: dict[str, str] = {}

    def find(self, x: str) -> str:
        self.parent.setdefault(x, x)
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: str, b: str) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller id wins so group roots are deterministic
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def dedup_merge(catalog: Catalog) -> tuple[Catalog, DedupReport]:
    """Merge branches that share image content and drop the extra copies.

    Branches connected by a shared ``content_key`` collapse into one branch
    (the lexicographically smallest id of the group).  Groups whose members
    carry two different known chains are ambiguous: they are reported under
    ``skipped`` and left untouched.  Within every surviving branch, one image
    per content_key is kept (smallest image_id); records without a
    content_key always pass through.
    """
    by_key: dict[str, list[ImageRecord]] = {}
    for rec in catalog.records:
        if rec.content_key is not None:
            by_key.setdefault(rec.content_key, []).append(rec)

    uf = _UnionFind()
    for key in sorted(by_key):
        branches = sorted({r.branch_id for r in by_key[key]})
        for other in branches[1:]:
            uf.union(branches[0], other)

    groups: dict[str, list[str]] = {}
    for rec in catalog.records:
        root = uf.find(rec.branch_id)
        members = groups.setdefault(root, [])
        if rec.branch_id not in members:
            members.append(rec.branch_id)

    branch_chain = catalog.branch_chain_map()
    merged_groups: list[tuple[str, ...]] = []
    skipped: list[dict] = []
    target: dict[str, str] = {}
    for root in sorted(groups):
        members = sorted(groups[root])
        if len(members) == 1:
            continue
        chains = sorted({branch_chain[b] for b in members if branch_chain[b] is not None})
        if len(chains) > 1:
            skipped.append({"branches": members, "chains": chains})
            continue
        merged_groups.append(tuple(members))
        for b in members:
            target[b] = members[0]

    out_records: list[ImageRecord] = []
    dropped: list[str] = []
    kept_key: dict[tuple[str, str], str] = {}
    # first pass fixes, per (branch, content_key), the surviving image id
    for rec in catalog.records:
        new_branch = target.get(rec.branch_id, rec.branch_id)
        if rec.content_key is None:
            continue
        slot = (new_branch, rec.content_key)
        if slot not in kept_key or rec.image_id < kept_key[slot]:
            kept_key[slot] = rec.image_id
    for rec in catalog.records:
        new_branch = target.get(rec.branch_id, rec.branch_id)
        if rec.content_key is not None and kept_key[(new_branch, rec.content_key)] != rec.image_id:
            dropped.append(rec.image_id)
            continue
        new_chain = rec.chain_id
        if rec.branch_id in target:
            merged = [b for b in groups[uf.find(rec.branch_id)] if branch_chain[b] is not None]
            new_chain = branch_chain[merged[0]] if merged else None
        if new_branch != rec.branch_id or new_chain != rec.chain_id:
            rec = ImageRecord(rec.image_id, new_branch, new_chain, rec.content_key, rec.feature_ref)
        out_records.append(rec)

    report = DedupReport(
        merged_groups=tuple(merged_groups),
        dropped=tuple(sorted(dropped)),
        skipped=tuple(skipped),
    )
    return Catalog.from_records(out_records), report


def stats(catalog: Catalog) -> CatalogStats:
    hist: dict[int, int] = {}
    for images in catalog.branch_index.values():
        hist[len(images)] = hist.get(len(images), 0) + 1
    return CatalogStats(
        images=len(catalog.records),
        branches=len(catalog.branch_index),
        chains=len(catalog.chain_index),
        branch_size_histogram=hist,
    )


def save_dedup_report(report: DedupReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_json_dict(), indent=2) + "\n", encoding="utf-8")
