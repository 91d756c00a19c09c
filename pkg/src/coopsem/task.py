"""Cooperative ID-retrieval: fusion, gating, identity classifier and ranking metrics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import torch
import torch.nn as nn

from .errors import EmptyIndexError, ShapeError

GATE_THRESHOLD = 0.5
SAME_INDEX = 1


class FusionModule(nn.Module):
    """Learned weighting across the user axis: a kernel-1 conv with N input channels."""

    def __init__(self, n_users: int, feature_dim: int):
        super().__init__()
        self.n_users = n_users
        self.feature_dim = feature_dim
        self.conv = nn.Conv1d(n_users, 1, kernel_size=1)
        with torch.no_grad():
            self.conv.weight.fill_(1.0 / n_users)
            self.conv.bias.zero_()

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-2:] != (self.n_users, self.feature_dim):
            raise ShapeError(
                f"expected (..., {self.n_users}, {self.feature_dim}) features, got {tuple(features.shape)}")
        squeeze = features.ndim == 2
        if squeeze:
            features = features.unsqueeze(0)
        out = self.conv(features).squeeze(1)
        return out.squeeze(0) if squeeze else out

    def fuse_subset(self, features: torch.Tensor, subset) -> torch.Tensor:
        """Fuse only the users in ``subset``, rescaling their weights to the full weight sum."""
        w = self.conv.weight.view(-1)
        ws = w[list(subset)]
        scale = w.sum() / ws.sum()
        return torch.einsum("...nf,n->...f", features[..., list(subset), :], ws * scale) + self.conv.bias


class GatingModule(nn.Module):
    """Same-identity verifier on a pair of recovered features.

    Output index 1 scores "same identity", index 0 "different".
    """

    def __init__(self, feature_dim: int):
        super().__init__()
        self.feature_dim = feature_dim
        self.fc = nn.Linear(feature_dim, 2)

    def forward(self, f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
        if f1.shape != f2.shape or f1.shape[-1] != self.feature_dim:
            raise ShapeError(
                f"gate inputs must both be {self.feature_dim}-dim, got {tuple(f1.shape)} / {tuple(f2.shape)}")
        # a linear layer cannot separate "near zero" from "far in any direction",
        # so the difference enters by magnitude
        return torch.sigmoid(self.fc((f1 - f2).abs()))


@dataclass
class GateDecision:
    phi: int
    score: tuple[float, float]


def gate(f1, f2, module: GatingModule, threshold: float = GATE_THRESHOLD) -> GateDecision:
    with torch.no_grad():
        s = module(torch.as_tensor(f1).float(), torch.as_tensor(f2).float())
    s = s.reshape(-1, 2)[0]
    return GateDecision(int(float(s[SAME_INDEX]) > threshold), (float(s[0]), float(s[1])))


class Identifier(nn.Module):
    """Fully connected identity classifier; ``forward`` returns logits."""

    def __init__(self, feature_dim: int, n_identities: int):
        super().__init__()
        self.fc = nn.Linear(feature_dim, n_identities)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.fc(f)

    def probabilities(self, f: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.fc(f), dim=-1)


def fused_subset(gate_same: np.ndarray) -> list[int]:
    """Largest set of users that are pairwise gated as the same identity.

    ``gate_same[i, j]`` is the pairwise decision. Ties go to the subset that
    comes first in lexicographic order. Returns [] when no pair is gated.
    """
    n = gate_same.shape[0]
    for size in range(n, 1, -1):
        for subset in combinations(range(n), size):
            if all(gate_same[i, j] for i, j in combinations(subset, 2)):
                return list(subset)
    return []


def cooperative_queries(recovered: torch.Tensor, gate_module: GatingModule | None,
                        fusion: FusionModule | None, threshold: float = GATE_THRESHOLD,
                        multi_user: bool = True):
    """Per-view query features for a batch of recovered features (b, N, F).

    Views gated as the same identity all query with their fused feature; the
    rest query with their own recovered feature. Returns (queries, fused_mask).
    """
    b, n, _ = recovered.shape
    queries = recovered.clone()
    fused = torch.zeros(b, n, dtype=torch.bool)
    if gate_module is None or fusion is None:
        return queries, fused
    with torch.no_grad():
        if n == 2:
            phi = gate_module(recovered[:, 0], recovered[:, 1])[:, SAME_INDEX] > threshold
            if phi.any():
                queries[phi] = fusion(recovered[phi]).unsqueeze(1).expand(-1, n, -1)
                fused[phi] = True
            return queries, fused
        if not multi_user:
            return queries, fused
        for k in range(b):
            same = np.eye(n, dtype=bool)
            for i, j in combinations(range(n), 2):
                s = gate_module(recovered[k, i], recovered[k, j])[SAME_INDEX] > threshold
                same[i, j] = same[j, i] = bool(s)
            subset = fused_subset(same)
            if subset:
                queries[k, subset] = fusion.fuse_subset(recovered[k], subset)
                fused[k, subset] = True
    return queries, fused


# --- retrieval -------------------------------------------------------------

@dataclass
class RetrievalIndex:
    features: np.ndarray
    labels: np.ndarray
    cams: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        self.cams = np.asarray(self.cams)
        if not (len(self.features) == len(self.labels) == len(self.cams)):
            raise ShapeError("gallery features, labels and camera ids must have equal length")

    def __len__(self):
        return len(self.labels)


@dataclass
class RankedList:
    """Gallery indices by ascending distance, with per-position relevance.

    ``n_relevant`` is the number of relevant gallery items the query could
    have retrieved; it exceeds ``relevant.sum()`` only for failed queries.
    """

    indices: np.ndarray
    distances: np.ndarray
    relevant: np.ndarray
    n_relevant: int = -1
    failed: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.relevant = np.asarray(self.relevant, dtype=bool)
        if self.n_relevant < 0:
            self.n_relevant = int(self.relevant.sum())


def euclidean_distances(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    diff = gallery - query[None, :]
    return np.sqrt(np.einsum("kf,kf->k", diff, diff))


def retrieve(query, index: RetrievalIndex, query_label=None, query_cam=None) -> RankedList:
    """Rank the gallery by Euclidean distance to ``query``.

    Gallery entries sharing both identity and camera with the query are
    dropped. Ties keep gallery order.
    """
    if len(index) == 0:
        raise EmptyIndexError("gallery is empty")
    query = np.asarray(query, dtype=np.float64)
    if query.shape[-1] != index.features.shape[1]:
        raise ShapeError(f"query dim {query.shape[-1]} != gallery dim {index.features.shape[1]}")
    keep = np.arange(len(index))
    if query_label is not None and query_cam is not None:
        keep = keep[~((index.labels == query_label) & (index.cams == query_cam))]
    dist = euclidean_distances(query, index.features[keep])
    order = np.argsort(dist, kind="stable")
    idx = keep[order]
    relevant = index.labels[idx] == query_label if query_label is not None else np.zeros(len(idx), bool)
    return RankedList(idx, dist[order], relevant)


def failed_query(index: RetrievalIndex, query_label, query_cam) -> RankedList:
    """Ranked list for a query whose transmission could not be decoded: a miss everywhere."""
    mask = (index.labels == query_label) & (index.cams != query_cam)
    return RankedList(np.empty(0, int), np.empty(0), np.empty(0, bool), int(mask.sum()), failed=True)


def _scored(lists):
    scored = [r for r in lists if r.n_relevant > 0]
    skipped = len(lists) - len(scored)
    if skipped:
        warnings.warn(f"{skipped} queries have no relevant gallery item and are not scored", stacklevel=3)
    return scored, skipped


def rank_n_accuracy(lists, n: int) -> float:
    """Fraction of queries with a relevant item in the top ``n``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    scored, _ = _scored(lists)
    if not scored:
        return 0.0
    hits = sum(bool(r.relevant[:n].any()) for r in scored)
    return hits / len(scored)


def average_precision(r: RankedList) -> float:
    if r.n_relevant == 0:
        raise ValueError("average precision undefined without relevant items")
    pos = np.flatnonzero(r.relevant)
    if pos.size == 0:
        return 0.0
    precision_at_hits = np.arange(1, pos.size + 1) / (pos + 1)
    return float(precision_at_hits.sum() / r.n_relevant)


def mean_average_precision(lists, return_skipped: bool = False):
    scored, skipped = _scored(lists)
    value = float(np.mean([average_precision(r) for r in scored])) if scored else 0.0
    return (value, skipped) if return_skipped else value


def ranked_list_rows(lists, query_ids=None):
    """Flatten ranked lists into audit rows (query, gallery, rank, distance, relevance)."""
    rows = []
    for q, r in enumerate(lists):
        qid = query_ids[q] if query_ids is not None else q
        for rank, (g, d, rel) in enumerate(zip(r.indices, r.distances, r.relevant), start=1):
            rows.append({"query_id": qid, "gallery_id": int(g), "rank": rank,
                         "distance": float(d), "relevant": int(rel)})
    return rows
