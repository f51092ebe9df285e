"""Render bench report rows into PNG figures next to the CSV output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _bar_positions(n_groups: int, n_series: int, width: float = 0.8):
    per = width / n_series
    return [[g + i * per - width / 2 + per / 2 for g in range(n_groups)] for i in range(n_series)]


def render_figures(report, workdir: str | Path) -> list[Path]:
    workdir = Path(workdir)
    paths = []
    uploads = [r for r in report.rows if r["phase"] == "upload"]
    if uploads:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        labels = [r["label"] for r in uploads]
        times = [float(r["t_end_to_end_s"]) for r in uploads]
        ax.bar(labels, times, color="#4878a8")
        ax.set_ylabel("upload time [s]")
        ax.set_title(f"{report.scenario}: upload time vs indexes/replicas")
        fig.tight_layout()
        p = workdir / f"{report.scenario}-upload.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        paths.append(p)

    queries = [r for r in report.rows if r["phase"] == "query"]
    if queries:
        by_label: dict[str, dict] = {}
        for r in queries:
            by_label.setdefault(r["label"], {})[r["splitting"]] = r
        labels = list(by_label)
        series = ["full-scan", "default", "hail"]
        colors = {"full-scan": "#b0b0b0", "default": "#4878a8", "hail": "#d1605e"}

        fig, ax = plt.subplots(figsize=(7, 3.5))
        xs = _bar_positions(len(labels), len(series))
        for i, s in enumerate(series):
            vals = [float(by_label[l].get(s, {}).get("t_end_to_end_s") or "nan") for l in labels]
            ax.bar(xs[i], vals, width=0.8 / len(series), label=s, color=colors[s])
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=20)
        ax.set_ylabel("job runtime [s]")
        ax.set_title(f"{report.scenario}: end-to-end job runtimes")
        ax.legend()
        fig.tight_layout()
        p = workdir / f"{report.scenario}-queries.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        paths.append(p)

        fig, ax = plt.subplots(figsize=(7, 3.5))
        rr_series = ["full-scan", "default"]
        xs = _bar_positions(len(labels), len(rr_series))
        for i, s in enumerate(rr_series):
            vals = [float(by_label[l].get(s, {}).get("rr_mean_s") or "nan") for l in labels]
            ax.bar(xs[i], vals, width=0.8 / len(rr_series),
                   label="full scan" if s == "full-scan" else "index scan", color=colors[s])
        ax.set_yscale("log")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=20)
        ax.set_ylabel("record reader time [s]")
        ax.set_title(f"{report.scenario}: mean record-reader time per task")
        ax.legend()
        fig.tight_layout()
        p = workdir / f"{report.scenario}-recordreader.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        paths.append(p)

    failover = [r for r in report.rows if r["phase"] == "failover"]
    if failover:
        fig, ax = plt.subplots(figsize=(4, 3.5))
        ax.bar([r["label"] for r in failover],
               [float(r["slowdown_pct"]) for r in failover], color="#d1605e")
        ax.set_ylabel("slowdown [%]")
        ax.set_title(f"{report.scenario}: slowdown under one node kill")
        fig.tight_layout()
        p = workdir / f"{report.scenario}-failover.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        paths.append(p)
    return paths
