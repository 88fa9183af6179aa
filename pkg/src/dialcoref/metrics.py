"""Coreference evaluation: MUC, B-cubed, CEAF_phi4, Avg F1, mention P/R.

Each metric exposes a counts form (precision/recall numerators and
denominators) so corpus-level scores aggregate counts across documents the
way the reference CoNLL scorer does, rather than averaging per-document F1.
Ratios with a zero denominator are defined as 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ValidationError

Clustering = list[frozenset]


def normalize_clustering(clusters) -> Clustering:
    out = [frozenset(c) for c in clusters]
    seen: set = set()
    for c in out:
        if not c:
            raise ValidationError("clusters must be non-empty")
        if seen & c:
            raise ValidationError("clusters must be pairwise disjoint")
        seen |= c
    return out


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def f1_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class Counts:
    p_num: float = 0.0
    p_den: float = 0.0
    r_num: float = 0.0
    r_den: float = 0.0

    def __iadd__(self, other: "Counts"):
        self.p_num += other.p_num
        self.p_den += other.p_den
        self.r_num += other.r_num
        self.r_den += other.r_den
        return self

    @property
    def prf(self) -> tuple[float, float, float]:
        p, r = _ratio(self.p_num, self.p_den), _ratio(self.r_num, self.r_den)
        return p, r, f1_score(p, r)


def _mention_map(clusters: Clustering) -> dict:
    return {m: c for c in clusters for m in c}


def _cluster_index(clusters: Clustering) -> dict:
    return {m: i for i, c in enumerate(clusters) for m in c}


# ---------------------------------------------------------------------------
# MUC (Vilain link-based)
# ---------------------------------------------------------------------------


def _vilain_half(clusters: Clustering, other_index: dict) -> tuple[float, float]:
    num = den = 0
    for cluster in clusters:
        partitions = {
            other_index[m] if m in other_index else ("solo", m) for m in cluster
        }
        num += len(cluster) - len(partitions)
        den += len(cluster) - 1
    return num, den


def muc_counts(gold, pred) -> Counts:
    gold, pred = normalize_clustering(gold), normalize_clustering(pred)
    r_num, r_den = _vilain_half(gold, _cluster_index(pred))
    p_num, p_den = _vilain_half(pred, _cluster_index(gold))
    return Counts(p_num, p_den, r_num, r_den)


def muc(gold, pred) -> tuple[float, float, float]:
    return muc_counts(gold, pred).prf


# ---------------------------------------------------------------------------
# B-cubed
# ---------------------------------------------------------------------------


def _b3_half(scored: Clustering, other: Clustering) -> tuple[float, float]:
    other_map = _mention_map(other)
    num = 0.0
    total = 0
    for cluster in scored:
        for m in cluster:
            overlap = len(cluster & other_map[m]) if m in other_map else 0
            num += overlap / len(cluster)
            total += 1
    return num, total


def b3_counts(gold, pred) -> Counts:
    gold, pred = normalize_clustering(gold), normalize_clustering(pred)
    p_num, p_den = _b3_half(pred, gold)
    r_num, r_den = _b3_half(gold, pred)
    return Counts(p_num, p_den, r_num, r_den)


def b3(gold, pred) -> tuple[float, float, float]:
    return b3_counts(gold, pred).prf


# ---------------------------------------------------------------------------
# CEAF_phi4 (optimal one-to-one cluster alignment)
# ---------------------------------------------------------------------------


def phi4(k: frozenset, r: frozenset) -> float:
    return 2 * len(k & r) / (len(k) + len(r))


def _phi4_matrix(gold: Clustering, pred: Clustering) -> np.ndarray:
    return np.array([[phi4(g, p) for p in pred] for g in gold], dtype=float)


def ceaf_phi4_counts(gold, pred) -> Counts:
    gold, pred = normalize_clustering(gold), normalize_clustering(pred)
    if not gold or not pred:
        return Counts(0.0, float(len(pred)), 0.0, float(len(gold)))
    sim = _phi4_matrix(gold, pred)
    # Kuhn-Munkres on the similarity matrix, padded to square with zeros.
    side = max(sim.shape)
    padded = np.zeros((side, side))
    padded[: sim.shape[0], : sim.shape[1]] = sim
    rows, cols = linear_sum_assignment(padded, maximize=True)
    total = float(padded[rows, cols].sum())
    return Counts(total, float(len(pred)), total, float(len(gold)))


def ceaf_phi4(gold, pred) -> tuple[float, float, float]:
    return ceaf_phi4_counts(gold, pred).prf


def ceaf_phi4_bruteforce(gold, pred) -> tuple[float, float, float]:
    """Exhaustive-permutation alignment; verification oracle for small inputs."""
    gold, pred = normalize_clustering(gold), normalize_clustering(pred)
    if not gold or not pred:
        return Counts(0.0, float(len(pred)), 0.0, float(len(gold))).prf
    small, large = (gold, pred) if len(gold) <= len(pred) else (pred, gold)
    best = 0.0
    for assignment in permutations(range(len(large)), len(small)):
        best = max(
            best,
            sum(phi4(small[i], large[j]) for i, j in enumerate(assignment)),
        )
    return Counts(best, float(len(pred)), best, float(len(gold))).prf


# ---------------------------------------------------------------------------
# Aggregate report
# ---------------------------------------------------------------------------


def avg_f1(f1_scores) -> float:
    """Arithmetic mean of the three metric F1s."""
    values = list(f1_scores)
    if len(values) != 3:
        raise ValidationError(f"Avg F1 takes exactly three F1 values, got {len(values)}")
    return float(sum(values)) / 3.0


def mention_prf_counts(gold_mentions, pred_mentions) -> Counts:
    gold, pred = set(gold_mentions), set(pred_mentions)
    hit = len(gold & pred)
    return Counts(hit, len(pred), hit, len(gold))


def mention_prf(gold_mentions, pred_mentions) -> tuple[float, float, float]:
    """Exact-span mention precision/recall over address sets."""
    return mention_prf_counts(gold_mentions, pred_mentions).prf


@dataclass
class MetricPRF:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, counts: Counts) -> "MetricPRF":
        return cls(*counts.prf)

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1}


@dataclass
class ScoreReport:
    muc: MetricPRF
    b3: MetricPRF
    ceaf_phi4: MetricPRF
    avg_f1: float
    mention: MetricPRF
    num_documents: int

    def to_dict(self) -> dict:
        return {
            "muc": self.muc.to_dict(),
            "b3": self.b3.to_dict(),
            "ceaf_phi4": self.ceaf_phi4.to_dict(),
            "avg_f1": self.avg_f1,
            "mention": self.mention.to_dict(),
            "num_documents": self.num_documents,
        }


def evaluate_documents(gold_by_doc: dict, pred_by_doc: dict) -> ScoreReport:
    """Score per document and aggregate counts, CoNLL-scorer style.

    Documents missing from one side count as empty clusterings there.
    """
    totals = {"muc": Counts(), "b3": Counts(), "ceaf": Counts(), "mention": Counts()}
    doc_ids = sorted(set(gold_by_doc) | set(pred_by_doc))
    for doc_id in doc_ids:
        gold = normalize_clustering(gold_by_doc.get(doc_id, []))
        pred = normalize_clustering(pred_by_doc.get(doc_id, []))
        totals["muc"] += muc_counts(gold, pred)
        totals["b3"] += b3_counts(gold, pred)
        totals["ceaf"] += ceaf_phi4_counts(gold, pred)
        totals["mention"] += mention_prf_counts(
            {m for c in gold for m in c}, {m for c in pred for m in c}
        )
    muc_prf = MetricPRF.from_counts(totals["muc"])
    b3_prf = MetricPRF.from_counts(totals["b3"])
    ceaf_prf = MetricPRF.from_counts(totals["ceaf"])
    return ScoreReport(
        muc=muc_prf,
        b3=b3_prf,
        ceaf_phi4=ceaf_prf,
        avg_f1=avg_f1((muc_prf.f1, b3_prf.f1, ceaf_prf.f1)),
        mention=MetricPRF.from_counts(totals["mention"]),
        num_documents=len(doc_ids),
    )
