"""SNR-stratified accuracy, confusion counts, and CSV/SVG emission.

Everything written here is a pure function of the metrics passed in, so
identical metrics give byte-identical files.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping
from xml.sax.saxutils import escape

import numpy as np
from scipy.stats import spearmanr

from .sigsynth import Dataset


@dataclass
class SnrMetrics:
    per_snr: dict[float, tuple[int, int]]
    confusion: np.ndarray
    gate_mean_by_snr: dict[float, float] = field(default_factory=dict)

    def bin_accuracy(self) -> dict[float, float]:
        return {s: c / t for s, (c, t) in sorted(self.per_snr.items())}

    @property
    def overall_accuracy(self) -> float:
        correct = sum(c for c, _ in self.per_snr.values())
        total = sum(t for _, t in self.per_snr.values())
        return correct / total


def accuracy_by_snr(predictions, ds: Dataset, gate=None) -> SnrMetrics:
    """Bucket predictions by the exact SNR grid value of each example.

    `gate` optionally carries the mixture's per-example high-SNR probability.
    Bins with no examples are simply absent.
    """
    preds = np.asarray(predictions, dtype=np.int64)
    if preds.shape != (len(ds),):
        raise ValueError(f"{preds.shape[0] if preds.ndim else 0} predictions for {len(ds)} examples")
    if gate is not None:
        gate = np.asarray(gate, dtype=np.float64)
        if gate.shape != (len(ds),):
            raise ValueError("gate outputs not aligned with dataset")
    K = ds.spec.n_classes
    if preds.size and (preds.min() < 0 or preds.max() >= K):
        raise ValueError(f"prediction outside [0, {K})")
    truth = ds.class_idx
    hit = preds == truth
    per_snr, gate_mean = {}, {}
    for snr in np.unique(ds.snr_db):
        sel = ds.snr_db == snr
        per_snr[float(snr)] = (int(hit[sel].sum()), int(sel.sum()))
        if gate is not None:
            gate_mean[float(snr)] = float(gate[sel].mean())
    confusion = np.zeros((K, K), dtype=np.int64)
    np.add.at(confusion, (truth, preds), 1)
    return SnrMetrics(per_snr, confusion, gate_mean)


def average_accuracy(m: SnrMetrics) -> float:
    """Unweighted mean of per-SNR-bin accuracies."""
    if not m.per_snr:
        raise ValueError("no SNR bins")
    return float(np.mean(list(m.bin_accuracy().values())))


def rank_correlation(x, y) -> float:
    """Spearman correlation using average ranks for ties."""
    return float(spearmanr(x, y).statistic)


# emission -----------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def _fmt_snr(s: float) -> str:
    return f"{s:g}"


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def accuracy_table(metrics: Mapping[str, SnrMetrics]) -> str:
    names = list(metrics)
    gated = [n for n in names if metrics[n].gate_mean_by_snr]
    snrs = sorted({s for m in metrics.values() for s in m.per_snr})
    rows = [["snr_db", *names, *(f"{n}_gate_mean" for n in gated)]]
    for s in snrs:
        row = [_fmt_snr(s)]
        for n in names:
            acc = metrics[n].bin_accuracy().get(s)
            row.append("" if acc is None else f"{acc:.6f}")
        for n in gated:
            g = metrics[n].gate_mean_by_snr.get(s)
            row.append("" if g is None else f"{g:.6f}")
        rows.append(row)
    return _csv(rows)


def confusion_table(m: SnrMetrics) -> str:
    K = m.confusion.shape[0]
    rows = [["true_class", *(f"pred_{k}" for k in range(K))]]
    rows += [[str(k), *(str(int(v)) for v in m.confusion[k])] for k in range(K)]
    return _csv(rows)


def summary_table(metrics: Mapping[str, SnrMetrics]) -> str:
    return _csv([["model", "avg_accuracy"], *([n, f"{average_accuracy(m):.6f}"] for n, m in metrics.items())])


def accuracy_svg(metrics: Mapping[str, SnrMetrics], title: str = "Accuracy by SNR") -> str:
    W, H = 800, 500
    left, right, top, bottom = 70, 160, 40, 60
    pw, ph = W - left - right, H - top - bottom
    snrs = sorted({s for m in metrics.values() for s in m.per_snr})
    lo, hi = snrs[0], snrs[-1]
    span = (hi - lo) or 1.0

    def px(s):
        return left + (s - lo) / span * pw

    def py(a):
        return top + (1.0 - a) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2 - right / 2:.1f}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for s in snrs:
        x = px(s)
        out.append(f'<line x1="{x:.2f}" y1="{top + ph}" x2="{x:.2f}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(
            f'<text x="{x:.2f}" y="{top + ph + 20}" font-family="sans-serif" font-size="12" text-anchor="middle">{_fmt_snr(s)}</text>'
        )
    for k in range(11):
        a = k / 10
        y = py(a)
        out.append(f'<line x1="{left - 5}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<line x1="{left}" y1="{y:.2f}" x2="{left + pw}" y2="{y:.2f}" stroke="#dddddd"/>')
        out.append(
            f'<text x="{left - 8}" y="{y + 4:.2f}" font-family="sans-serif" font-size="12" text-anchor="end">{a:.1f}</text>'
        )
    out.append(
        f'<text x="{left + pw / 2:.1f}" y="{H - 15}" font-family="sans-serif" font-size="14" text-anchor="middle">SNR (dB)</text>'
    )
    out.append(
        f'<text x="18" y="{top + ph / 2:.1f}" font-family="sans-serif" font-size="14" text-anchor="middle" '
        f'transform="rotate(-90 18 {top + ph / 2:.1f})">Accuracy</text>'
    )
    for j, (name, m) in enumerate(metrics.items()):
        color = PALETTE[j % len(PALETTE)]
        pts = " ".join(f"{px(s):.2f},{py(a):.2f}" for s, a in m.bin_accuracy().items())
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = top + 20 + 22 * j
        lx = left + pw + 20
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 25}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 32}" y="{ly + 4}" font-family="sans-serif" font-size="13">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(metrics: Mapping[str, SnrMetrics], out_dir) -> list[Path]:
    """Write the accuracy/confusion/summary CSVs and the accuracy-vs-SNR chart."""
    if not metrics:
        raise ValueError("need metrics for at least one model")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "accuracy_by_snr.csv": accuracy_table(metrics),
        "summary.csv": summary_table(metrics),
        "accuracy_by_snr.svg": accuracy_svg(metrics),
    }
    for name, m in metrics.items():
        files[f"confusion_{name}.csv"] = confusion_table(m)
    written = []
    for fname, text in files.items():
        path = out / fname
        path.write_text(text, encoding="utf-8", newline="")
        written.append(path)
    return written


# metrics persistence, so `report` can run after separate `eval` invocations ---------


def metrics_to_dict(m: SnrMetrics) -> dict:
    return {
        "per_snr": [[s, c, t] for s, (c, t) in sorted(m.per_snr.items())],
        "confusion": m.confusion.tolist(),
        "gate_mean_by_snr": [[s, g] for s, g in sorted(m.gate_mean_by_snr.items())],
    }


def metrics_from_dict(d: dict) -> SnrMetrics:
    return SnrMetrics(
        {float(s): (int(c), int(t)) for s, c, t in d["per_snr"]},
        np.array(d["confusion"], dtype=np.int64),
        {float(s): float(g) for s, g in d["gate_mean_by_snr"]},
    )
