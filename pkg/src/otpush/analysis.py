"""Post-hoc latent-space diagnostics: W2 alignment, KNN pairing, PCA plots.

Reads a trained checkpoint back through the encoder, then measures how
well the two domains' latent clouds overlap (mean Wasserstein-2 over
deterministic subsample draws) and whether nearest cross-domain
neighbours share behaviour metadata. The report path writes CSV metrics
plus an SVG scatter of the 2D PCA projection.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as model_mod
from . import transport
from .model import Checkpoint
from .numkit import ContractError, SeededRng
from .pushmini import DomainDataset
from .trainer import STEM_FOR_DOMAIN

W2_DRAWS = 10
W2_MAX_POINTS = 64
W2_BLUR = 0.01


@dataclass
class LatentDump:
    """Encoded latents with their provenance metadata, one row per sample."""

    domains: list
    variants: list
    episode_ids: list
    step_indices: list
    latents: np.ndarray

    def __len__(self) -> int:
        return self.latents.shape[0]

    def select(self, domain: str) -> np.ndarray:
        mask = np.array([d == domain for d in self.domains])
        return self.latents[mask]


def dump_latents(ckpt: Checkpoint, datasets, max_per_domain: int,
                 seed: int = 0) -> LatentDump:
    """Encode a deterministic per-domain subsample of dataset records."""
    domains: list[str] = []
    variants: list[str] = []
    episode_ids: list[int] = []
    step_indices: list[int] = []
    chunks: list[np.ndarray] = []
    for dataset in datasets:
        records = [
            (ep_idx, t, np.asarray(obs, dtype=np.float64), ep.variant)
            for ep_idx, ep in enumerate(dataset.episodes)
            for t, obs in enumerate(ep.observations)
        ]
        if max_per_domain < len(records):
            rng = SeededRng(seed).stream(f"dump/{dataset.domain}")
            keep = np.sort(rng.choice(len(records), size=max_per_domain, replace=False))
            records = [records[i] for i in keep]
        if not records:
            continue
        obs = np.stack([r[2] for r in records])
        obs_stats = ckpt.norm_stats.get(f"{dataset.domain}_obs")
        if obs_stats is not None:
            obs = obs_stats.normalize(obs)
        stem = STEM_FOR_DOMAIN[dataset.domain]
        z = model_mod.encode(ckpt.params, obs, stem, ckpt.model_config.activation)
        chunks.append(z)
        domains.extend([dataset.domain] * len(records))
        variants.extend([r[3] for r in records])
        episode_ids.extend([r[0] for r in records])
        step_indices.extend([r[1] for r in records])
    latents = np.concatenate(chunks) if chunks else np.zeros((0, ckpt.model_config.latent_dim))
    return LatentDump(domains=domains, variants=variants, episode_ids=episode_ids,
                      step_indices=step_indices, latents=latents)


@dataclass
class KnnRow:
    """One target sample and its k nearest source samples."""

    target_index: int
    target_variant: str
    neighbor_indices: list
    neighbor_variants: list
    neighbor_episode_ids: list
    neighbor_step_indices: list
    distances: list


@dataclass
class AlignmentReport:
    w2_mean: float
    w2_draws: list
    knn: list
    knn1_variant_match: float


def latent_alignment_report(dump: LatentDump, k: int = 5) -> AlignmentReport:
    """Cross-domain W2 distance plus a target-to-source KNN table.

    W2 is averaged over fixed subsample draws; for each target latent the
    k nearest source latents are found by brute-force scan, and the share
    of rank-1 neighbours with a matching variant label is reported.
    """
    src = dump.select("source")
    tgt = dump.select("target")
    if src.shape[0] == 0 or tgt.shape[0] == 0:
        raise ContractError("alignment report needs latents from both domains")
    draws = [
        transport.wasserstein2(src, tgt, blur=W2_BLUR, max_points=W2_MAX_POINTS, seed=d)
        for d in range(W2_DRAWS)
    ]
    src_idx = [i for i, d in enumerate(dump.domains) if d == "source"]
    tgt_idx = [i for i, d in enumerate(dump.domains) if d == "target"]
    dists = transport.latent_sq_dist(dump.latents[tgt_idx], dump.latents[src_idx])
    k = min(k, len(src_idx))
    knn_rows: list[KnnRow] = []
    matches = 0
    for row, ti in enumerate(tgt_idx):
        order = np.argsort(dists[row], kind="stable")[:k]
        neighbors = [src_idx[j] for j in order]
        knn_rows.append(KnnRow(
            target_index=ti,
            target_variant=dump.variants[ti],
            neighbor_indices=neighbors,
            neighbor_variants=[dump.variants[j] for j in neighbors],
            neighbor_episode_ids=[dump.episode_ids[j] for j in neighbors],
            neighbor_step_indices=[dump.step_indices[j] for j in neighbors],
            distances=[float(np.sqrt(dists[row, j])) for j in order],
        ))
        if dump.variants[neighbors[0]] == dump.variants[ti]:
            matches += 1
    return AlignmentReport(
        w2_mean=float(np.mean(draws)),
        w2_draws=[float(d) for d in draws],
        knn=knn_rows,
        knn1_variant_match=matches / len(tgt_idx),
    )


@dataclass
class Pca2Result:
    coords: np.ndarray
    components: np.ndarray
    explained: np.ndarray
    degenerate: bool


def pca2(latents: np.ndarray) -> Pca2Result:
    """Top-2 principal components by eigendecomposition of the covariance.

    The sign convention makes each component's largest-magnitude loading
    positive. A (near) rank-1 cloud yields an all-zero second coordinate,
    flagged via ``degenerate``.
    """
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ContractError("pca2 needs at least 2 samples")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / x.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals, kind="stable")[::-1][:2]
    explained = np.maximum(eigvals[order], 0.0)
    components = eigvecs[:, order].T.copy()
    scale = max(float(explained[0]), 0.0)
    degenerate = bool(explained[-1] <= max(scale * 1e-12, 1e-30)) or len(order) < 2
    if components.shape[0] < 2:
        components = np.vstack([components, np.zeros((1, x.shape[1]))])
        explained = np.append(explained, 0.0)
        degenerate = True
    for i in range(2):
        j = int(np.argmax(np.abs(components[i])))
        if components[i, j] < 0:
            components[i] = -components[i]
    if degenerate:
        components[1] = 0.0
    coords = centered @ components.T
    return Pca2Result(coords=coords, components=components,
                      explained=explained[:2], degenerate=degenerate)


# ---------------------------------------------------------------------------
# Report files: CSV metrics + SVG scatter
# ---------------------------------------------------------------------------


def write_alignment_outputs(out_dir, dump: LatentDump, report: AlignmentReport) -> list:
    """Write metrics CSV, KNN table CSV, and the PCA scatter SVG; returns paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "alignment_metrics.csv"
    with open(metrics_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        w.writerow(["w2_mean", repr(report.w2_mean)])
        for i, d in enumerate(report.w2_draws):
            w.writerow([f"w2_draw_{i}", repr(d)])
        w.writerow(["knn1_variant_match", repr(report.knn1_variant_match)])
        w.writerow(["samples", len(dump)])
    knn_path = out_dir / "knn_pairs.csv"
    with open(knn_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["target_index", "target_variant", "rank", "source_index",
                    "source_variant", "source_episode", "source_step", "distance"])
        for row in report.knn:
            for rank, (j, var, ep, st, dist) in enumerate(zip(
                    row.neighbor_indices, row.neighbor_variants,
                    row.neighbor_episode_ids, row.neighbor_step_indices,
                    row.distances), start=1):
                w.writerow([row.target_index, row.target_variant, rank, j,
                            var, ep, st, repr(dist)])
    svg_path = out_dir / "latent_pca.svg"
    write_pca_figure(svg_path, dump)
    return [metrics_path, knn_path, svg_path]


def write_pca_figure(path, dump: LatentDump) -> None:
    """2D PCA scatter, colored by variant, marker per domain."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "otpush"
    result = pca2(dump.latents)
    variant_list = sorted(set(dump.variants))
    cmap = plt.get_cmap("tab10")
    colors = {v: cmap(i % 10) for i, v in enumerate(variant_list)}
    markers = {"source": "o", "target": "^"}
    fig, ax = plt.subplots(figsize=(6, 5))
    for domain in ("source", "target"):
        for variant in variant_list:
            mask = np.array([d == domain and v == variant
                             for d, v in zip(dump.domains, dump.variants)])
            if not mask.any():
                continue
            ax.scatter(result.coords[mask, 0], result.coords[mask, 1],
                       s=12, alpha=0.7, marker=markers[domain],
                       color=colors[variant], label=f"{domain}/{variant}")
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    ax.set_title("latent projection" + (" (degenerate)" if result.degenerate else ""))
    ax.legend(fontsize=7, loc="best")
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
