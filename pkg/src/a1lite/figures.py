"""Matplotlib figures for bench and query runs, written to files only."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, out_dir: str | Path, name: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def bench_figures(summary: dict, latencies_ms: list[float], starts_s: list[float],
                  out_dir: str | Path) -> list[Path]:
    """Latency histogram and a latency-over-time scatter for one bench run."""
    paths = []
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if latencies_ms:
        ax.hist(latencies_ms, bins=min(50, max(5, len(latencies_ms) // 5)), color="#4a7ab5")
        for label, key, style in (("mean", "mean_ms", "--"), ("p99", "p99_ms", ":")):
            ax.axvline(summary[key], color="black", linestyle=style, label=f"{label} {summary[key]:.1f} ms")
        ax.legend()
    ax.set_xlabel("end-to-end latency (ms)")
    ax.set_ylabel("queries")
    ax.set_title(f"{summary['query']} at {summary['target_qps']} qps (desk-scale smoke run)")
    paths.append(_save(fig, out_dir, "bench_latency_hist.png"))

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.scatter(starts_s, latencies_ms, s=6, color="#b5544a")
    ax.set_xlabel("issue time (s)")
    ax.set_ylabel("latency (ms)")
    ax.set_title("latency over the run")
    paths.append(_save(fig, out_dir, "bench_latency_timeline.png"))
    return paths


def query_figures(results: list[dict], out_dir: str | Path) -> list[Path]:
    """Stacked local/remote read counts per query, annotated with the hop
    local fraction."""
    fig, ax = plt.subplots(figsize=(max(4, 1.4 * len(results)), 3.5))
    names = [r["name"] for r in results]
    local = [r["metrics"].get("hop_local_reads", 0) for r in results]
    remote = [r["metrics"].get("hop_remote_reads", 0) for r in results]
    ax.bar(names, local, color="#4a7ab5", label="local")
    ax.bar(names, remote, bottom=local, color="#d9a441", label="remote")
    for i, r in enumerate(results):
        frac = r["metrics"].get("hop_local_fraction")
        if frac is not None:
            ax.text(i, local[i] + remote[i], f"{frac:.2f}", ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("vertex reads during hops")
    ax.set_title("read locality per query")
    ax.legend()
    return [_save(fig, out_dir, "query_locality.png")]
