"""Retrieval metrics (CMC / mAP under the cosine metric), the ablation
harness that trains and scores every head variant under shared seeds, and
per-frame weight inspection against ground-truth quality labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from .model import (
    METHODS,
    HeadParams,
    HyperParams,
    TrainingDivergedError,
    method_head,
    sample_frames,
    sequence_tensors,
    train,
    video_feature,
)
from .synthdata import DatasetConfig, SequenceBatch, SyntheticDataset, make_dataset
from .tensor import DegenerateInputError


class ProtocolError(ValueError):
    """Evaluation protocol violated, e.g. a query with no gallery match."""


@dataclass
class Ranking:
    """Gallery order for one query, most similar first.

    ``order`` is a permutation of gallery indices (ties broken by ascending
    index); ``matches`` marks correct identities in ranked order.
    """

    query_id: int
    order: np.ndarray
    matches: np.ndarray


def retrieve(
    query_h: np.ndarray,
    gallery_hs: np.ndarray,
    query_id: int,
    gallery_ids: np.ndarray,
) -> Ranking:
    """Rank a gallery by descending cosine similarity to the query."""
    query_h = np.asarray(query_h, dtype=np.float64)
    gallery_hs = np.asarray(gallery_hs, dtype=np.float64)
    if gallery_hs.ndim != 2 or gallery_hs.shape[0] == 0:
        raise ProtocolError("retrieve: gallery must be a nonempty (N, d) array")
    qn = np.linalg.norm(query_h)
    gn = np.linalg.norm(gallery_hs, axis=1)
    if qn < 1e-12 or np.any(gn < 1e-12):
        raise DegenerateInputError("retrieve: a feature has ~zero norm")
    sims = gallery_hs @ query_h / (gn * qn)
    order = np.argsort(-sims, kind="stable")
    matches = np.asarray(gallery_ids)[order] == query_id
    return Ranking(query_id=query_id, order=order, matches=matches)


def _first_match_rank(r: Ranking) -> int:
    hits = np.flatnonzero(r.matches)
    if hits.size == 0:
        raise ProtocolError(f"query {r.query_id} has no gallery match")
    return int(hits[0])


def cmc(rankings: list[Ranking], k: int) -> float:
    """Fraction of queries whose first correct match lands in the top k."""
    if not rankings:
        raise ProtocolError("cmc: no rankings")
    return float(np.mean([_first_match_rank(r) < k for r in rankings]))


def mean_ap(rankings: list[Ranking]) -> float:
    """Mean over queries of precision averaged at each correct-match rank."""
    if not rankings:
        raise ProtocolError("mean_ap: no rankings")
    aps = []
    for r in rankings:
        hits = np.flatnonzero(r.matches)
        if hits.size == 0:
            raise ProtocolError(f"query {r.query_id} has no gallery match")
        precisions = (np.arange(hits.size) + 1.0) / (hits + 1.0)
        aps.append(precisions.mean())
    return float(np.mean(aps))


@dataclass
class EvalReport:
    """CMC points and mAP for one evaluated head."""

    cmc: dict[int, float]
    mean_ap: float


def video_descriptor(seq: SequenceBatch, head: HeadParams) -> np.ndarray:
    """Video feature of a stored sequence under test-time frame sampling."""
    idxs = sample_frames(seq.num_frames, head.hyper.T, "test")
    h, _ = video_feature(sequence_tensors(seq, idxs), head)
    return h.data


def evaluate_head(
    head: HeadParams,
    query: list[SequenceBatch],
    gallery: list[SequenceBatch],
    ks: tuple[int, ...] = (1, 5, 20),
) -> EvalReport:
    """Retrieve every query against the gallery and compute CMC / mAP."""
    gallery_hs = np.stack([video_descriptor(s, head) for s in gallery])
    gallery_ids = np.array([s.identity for s in gallery])
    rankings = [
        retrieve(video_descriptor(s, head), gallery_hs, s.identity, gallery_ids)
        for s in query
    ]
    return EvalReport(
        cmc={k: cmc(rankings, k) for k in ks}, mean_ap=mean_ap(rankings)
    )


@dataclass
class AblationRow:
    """Seed-averaged metrics for one method; failures counts diverged runs."""

    method: str
    rank1: float
    rank5: float
    rank20: float
    map: float
    failures: int = 0


def train_and_evaluate(
    dataset: SyntheticDataset, hyper: HyperParams, method: str, seed: int
) -> tuple[EvalReport, HeadParams, list[float]]:
    """Train one method on a dataset and score it on the eval split."""
    head = method_head(hyper, len(dataset.train_ids), seed, method)
    _, curve = train(dataset, head, seed)
    return evaluate_head(head, dataset.query, dataset.gallery), head, curve


def ablate(
    data: DatasetConfig | SyntheticDataset,
    hyper: HyperParams,
    seeds: list[int],
    methods: tuple[str, ...] = tuple(METHODS),
) -> tuple[list[AblationRow], list[dict]]:
    """Train every method with identical seeds and schedules, then score.

    Given a DatasetConfig, each seed generates its own dataset; given a
    concrete dataset, only the training seed varies.  A diverged run is
    flagged in its record and skipped in the aggregate.  Returns the
    seed-averaged rows plus per-seed raw records.
    """
    for m in methods:
        if m not in METHODS:
            raise ProtocolError(f"unknown method {m!r}")
    records: list[dict] = []
    for seed in seeds:
        dataset = data if isinstance(data, SyntheticDataset) else make_dataset(data, seed)
        for method in methods:
            record = {"method": method, "seed": seed, "ok": True}
            try:
                report, _, _ = train_and_evaluate(dataset, hyper, method, seed)
                record.update(
                    rank1=report.cmc[1],
                    rank5=report.cmc[5],
                    rank20=report.cmc[20],
                    map=report.mean_ap,
                )
            except TrainingDivergedError as exc:
                record.update(ok=False, error=str(exc))
            records.append(record)
    rows = []
    for method in methods:
        mine = [r for r in records if r["method"] == method]
        good = [r for r in mine if r["ok"]]
        if good:
            rows.append(
                AblationRow(
                    method=method,
                    rank1=float(np.mean([r["rank1"] for r in good])),
                    rank5=float(np.mean([r["rank5"] for r in good])),
                    rank20=float(np.mean([r["rank20"] for r in good])),
                    map=float(np.mean([r["map"] for r in good])),
                    failures=len(mine) - len(good),
                )
            )
        else:
            rows.append(
                AblationRow(method, math.nan, math.nan, math.nan, math.nan, len(mine))
            )
    return rows, records


def format_ablation_table(rows: list[AblationRow]) -> str:
    """Human-readable aligned table of ablation rows."""
    header = f"{'method':<10} {'rank1':>7} {'rank5':>7} {'rank20':>7} {'mAP':>7}"
    lines = [header, "-" * len(header)]
    for r in rows:
        flag = f"  [{r.failures} diverged]" if r.failures else ""
        lines.append(
            f"{r.method:<10} {r.rank1:>7.3f} {r.rank5:>7.3f} {r.rank20:>7.3f} "
            f"{r.map:>7.3f}{flag}"
        )
    return "\n".join(lines)


@dataclass
class WeightReport:
    """Per-frame scores and weights next to ground-truth quality labels."""

    rows: list[tuple[int, float, float, float]]  # (frame, s, w, quality)
    spearman: float

    def csv_lines(self) -> list[str]:
        lines = ["frame,s,w,quality"]
        for frame, s, w, q in self.rows:
            lines.append(f"{frame},{s:.6f},{w:.6f},{q:.6f}")
        return lines


def dump_weights(seq: SequenceBatch, head: HeadParams) -> WeightReport:
    """Frame weights of one sequence plus their rank correlation with quality.

    Uses all frames (test-time sampling).  Heads without a score path
    report NaN for s; plain-mean heads report uniform weights.
    """
    if seq.num_frames < 2:
        raise ProtocolError("dump_weights needs at least 2 frames")
    idxs = sample_frames(seq.num_frames, head.hyper.T, "test")
    _, diag = video_feature(sequence_tensors(seq, idxs), head)
    t = len(idxs)
    s = diag.s.data if diag.s is not None else np.full(t, np.nan)
    w = diag.w.data if diag.w is not None else np.full(t, 1.0)
    quality = seq.quality[idxs].astype(np.float64)
    rows = [
        (int(i), float(s[j]), float(w[j]), float(quality[j]))
        for j, i in enumerate(idxs)
    ]
    if np.ptp(w) == 0.0 or np.ptp(quality) == 0.0:
        rho = math.nan
    else:
        rho = float(spearmanr(w, quality).statistic)
    return WeightReport(rows=rows, spearman=rho)
