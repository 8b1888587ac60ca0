"""Retrieval evaluation: CMC and mAP under the single-query protocol.

Every manifest item serves as a query against the full manifest as gallery;
gallery items sharing BOTH identity and camera with the query (including
the query itself) are excluded, same-camera items of other identities stay.
Rankings sort ascending by distance with lowest-index tie-break. CMC at
rank k is the fraction of queries whose first correct match appears within
the top k; AP averages precision at each relevant position.

Metric arithmetic deliberately accumulates in plain ascending order so the
results are bit-reproducible against a naive reference implementation.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import DatasetManifest
from .errors import ProtocolError
from .matcher import distances_to_gallery
from .training import Model, SequenceStore

ABLATION_MODES = ("avepool", "intra", "inter", "duatm")
METRIC_COLUMNS = ("mode", "R1", "R5", "R20", "mAP")


@dataclass
class RankingResult:
    """Gallery indices ordered by ascending distance, exclusions removed."""

    order: np.ndarray  # valid gallery indices, best match first
    distances: np.ndarray  # distances in ranked order
    valid: np.ndarray  # per-gallery inclusion mask


@dataclass
class MetricReport:
    cmc: np.ndarray  # ranks 1..K
    map: float
    num_queries: int

    def rank(self, k: int) -> float:
        return float(self.cmc[k - 1])


def _rank_from_distances(
    distances: np.ndarray,
    query_label: int,
    query_camera: int,
    gallery_labels: np.ndarray,
    gallery_cameras: np.ndarray,
) -> RankingResult:
    valid = ~((gallery_labels == query_label) & (gallery_cameras == query_camera))
    candidates = np.nonzero(valid)[0]
    if candidates.size == 0:
        raise ProtocolError("empty effective gallery after protocol exclusions")
    order_local = np.argsort(distances[candidates], kind="stable")
    order = candidates[order_local]
    return RankingResult(order=order, distances=distances[order], valid=valid)


def manifest_features(manifest: DatasetManifest, model: Model | None) -> list[np.ndarray]:
    """Inference-mode feature sequences for every manifest item."""
    dim = None if model is None else model.dim
    store = SequenceStore(manifest, dim)
    extractor = None if model is None else model.extractor
    return [store.node(i, extractor).value for i in range(len(manifest.items))]


def rank_gallery(
    query_index: int,
    manifest: DatasetManifest,
    model: Model | None,
    mode: str | None = None,
    features: list[np.ndarray] | None = None,
) -> RankingResult:
    """Rank the manifest's gallery for the query at ``query_index``."""
    mode = _resolve_mode(model, mode)
    if features is None:
        features = manifest_features(manifest, model)
    labels, cameras = manifest.labels(), manifest.cameras()
    params = None if model is None else model.matcher
    distances = distances_to_gallery(features[query_index], features, params, mode=mode)
    return _rank_from_distances(
        distances, labels[query_index], cameras[query_index], labels, cameras
    )


def compute_cmc(
    rankings: list[RankingResult],
    query_labels: np.ndarray,
    gallery_labels: np.ndarray,
    k_max: int = 20,
) -> np.ndarray:
    """cmc[k-1] = fraction of queries whose first hit has rank <= k."""
    if len(rankings) < 1:
        raise ProtocolError("CMC needs at least one query")
    counts = np.zeros(k_max, dtype=np.int64)
    for ranking, q_label in zip(rankings, query_labels):
        ranked = gallery_labels[ranking.order] == q_label
        hits = np.nonzero(ranked)[0]
        if hits.size == 0:
            continue
        first = int(hits[0])
        if first < k_max:
            counts[first:] += 1
    return counts / len(rankings)


def compute_map(
    rankings: list[RankingResult],
    query_labels: np.ndarray,
    gallery_labels: np.ndarray,
) -> float:
    """Mean over queries of average precision at relevant positions."""
    aps = []
    for q_idx, (ranking, q_label) in enumerate(zip(rankings, query_labels)):
        ranked = gallery_labels[ranking.order] == q_label
        if not ranked.any():
            raise ProtocolError(f"query {q_idx} has no relevant gallery item after exclusions")
        hits = 0
        ap_sum = 0.0
        for position, relevant in enumerate(ranked, start=1):
            if relevant:
                hits += 1
                ap_sum += hits / position
        aps.append(ap_sum / hits)
    total = 0.0
    for ap in aps:
        total += ap
    return total / len(aps)


def evaluate_manifest(
    manifest: DatasetManifest,
    model: Model | None,
    mode: str | None = None,
    k_max: int = 20,
    threads: int = 1,
) -> MetricReport:
    """Full single-query evaluation over a manifest (queries = gallery)."""
    mode = _resolve_mode(model, mode)
    features = manifest_features(manifest, model)
    labels, cameras = manifest.labels(), manifest.cameras()
    params = None if model is None else model.matcher

    def rank_one(i: int) -> RankingResult:
        distances = distances_to_gallery(features[i], features, params, mode=mode)
        return _rank_from_distances(distances, labels[i], cameras[i], labels, cameras)

    indices = range(len(manifest.items))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rankings = list(pool.map(rank_one, indices))
    else:
        rankings = [rank_one(i) for i in indices]
    return MetricReport(
        cmc=compute_cmc(rankings, labels, labels, k_max=k_max),
        map=compute_map(rankings, labels, labels),
        num_queries=len(rankings),
    )


def _resolve_mode(model: Model | None, mode: str | None) -> str:
    if mode is not None:
        return mode
    if model is None:
        return "avepool"
    return model.mode


def ablation_report(
    manifest: DatasetManifest,
    models: dict[str, Model | None],
    k_max: int = 20,
    threads: int = 1,
) -> list[dict]:
    """R1/R5/R20/mAP rows for each ablation mode on one evaluation split.

    ``models`` maps mode name to a trained model; the parameter-free
    ``avepool`` row accepts None.
    """
    rows = []
    for mode in ABLATION_MODES:
        if mode not in models:
            continue
        report = evaluate_manifest(manifest, models[mode], mode=mode, k_max=k_max, threads=threads)
        rows.append(
            {
                "mode": mode,
                "R1": report.rank(1),
                "R5": report.rank(5),
                "R20": report.rank(20),
                "mAP": report.map,
            }
        )
    return rows


def write_metrics_csv(path, rows: list[dict]) -> None:
    """Write mode/R1/R5/R20/mAP rows with full-precision floats."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow(
                [row["mode"]] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]]
            )
