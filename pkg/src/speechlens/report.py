"""Rendering: SVG relevancy heatmaps, CSV tables, and PNG summary figures.

The three relevancy views are hand-built SVG so their structure stays
checkable: the token strip holds exactly one ``<text>`` node per token
(over one highlight ``<rect>`` each), the patch overlay exactly one
``<rect>`` per patch whose gray fill encodes patch energy and whose
opacity encodes relevancy — the lower the score, the more transparent —
and the sentence chart one bar per sentence ordered by ascending score,
left to right. When every score in a view is zero it is drawn at a
uniform minimum opacity with a machine-readable warning in the SVG
``<desc>``. Aggregate outputs (metrics/predictions CSV, comparison and
loss-curve figures) use the csv module and matplotlib.
"""

import csv
import os
import xml.etree.ElementTree as ET

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "render_token_strip", "render_patch_grid", "render_sentence_bars",
    "render_heatmap", "write_metrics_csv", "write_predictions_csv",
    "metric_comparison_figure", "loss_curve_figure",
]

SVG_NS = "http://www.w3.org/2000/svg"

_MIN_ALPHA = 0.08          # floor used when every score is zero
_ZERO_WARNING = "warning: all relevancy scores are zero; rendered at uniform minimum opacity"
_ACCENT = "#c43d3d"        # token highlight color

_PNG_METADATA = {"Software": "speechlens"}


def _alphas(scores) -> tuple:
    """Per-item opacity score/max, or a uniform floor when max == 0.

    Returns (alphas, all_zero flag).
    """
    scores = np.asarray(scores, dtype=float)
    top = scores.max() if scores.size else 0.0
    if top <= 0.0:
        return np.full(scores.shape, _MIN_ALPHA), True
    return scores / top, False


def _svg(width: float, height: float, description: str | None = None):
    root = ET.Element("svg", {
        "xmlns": SVG_NS,
        "width": f"{width:.0f}",
        "height": f"{height:.0f}",
        "viewBox": f"0 0 {width:.0f} {height:.0f}",
    })
    if description:
        desc = ET.SubElement(root, "desc")
        desc.text = description
    return root


def _write_svg(root, path) -> None:
    data = ET.tostring(root, encoding="unicode")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(data)
        fh.write("\n")


def render_token_strip(token_labels, scores, path) -> None:
    """One highlight cell per token; background opacity tracks score/max."""
    if len(token_labels) != len(scores):
        raise ValueError(
            f"{len(token_labels)} tokens but {len(scores)} scores")
    alphas, all_zero = _alphas(scores)
    cell_w, cell_h, gap, pad = 64, 36, 4, 8
    width = pad * 2 + len(token_labels) * (cell_w + gap) - gap
    height = pad * 2 + cell_h
    root = _svg(width, height, _ZERO_WARNING if all_zero else None)
    for i, (label, alpha) in enumerate(zip(token_labels, alphas)):
        x = pad + i * (cell_w + gap)
        ET.SubElement(root, "rect", {
            "x": f"{x}", "y": f"{pad}",
            "width": f"{cell_w}", "height": f"{cell_h}",
            "fill": _ACCENT, "fill-opacity": f"{alpha:.4f}",
            "stroke": "#888888", "stroke-width": "0.5",
        })
        text = ET.SubElement(root, "text", {
            "x": f"{x + cell_w / 2}", "y": f"{pad + cell_h / 2 + 4}",
            "text-anchor": "middle",
            "font-family": "monospace", "font-size": "13",
        })
        text.text = str(label)
    _write_svg(root, path)


def render_patch_grid(patches, scores, grid, path) -> None:
    """One cell per patch: gray fill from patch energy, opacity from score."""
    patches = np.asarray(patches, dtype=float)
    rows, cols = grid
    if rows * cols != patches.shape[0]:
        raise ValueError(
            f"grid {rows}x{cols} does not cover {patches.shape[0]} patches")
    if len(scores) != patches.shape[0]:
        raise ValueError(
            f"{patches.shape[0]} patches but {len(scores)} scores")
    alphas, all_zero = _alphas(scores)
    energy = patches.mean(axis=1)
    spread = energy.max() - energy.min()
    if spread > 0:
        shade = (energy - energy.min()) / spread
    else:
        shade = np.full(energy.shape, 0.5)
    cell, gap, pad = 26, 2, 8
    width = pad * 2 + cols * (cell + gap) - gap
    height = pad * 2 + rows * (cell + gap) - gap
    root = _svg(width, height, _ZERO_WARNING if all_zero else None)
    for p in range(patches.shape[0]):
        r, c = divmod(p, cols)
        gray = int(round(235 * (1.0 - shade[p])) + 10)
        ET.SubElement(root, "rect", {
            "x": f"{pad + c * (cell + gap)}", "y": f"{pad + r * (cell + gap)}",
            "width": f"{cell}", "height": f"{cell}",
            "fill": f"rgb({gray},{gray},{gray})",
            "fill-opacity": f"{alphas[p]:.4f}",
        })
    _write_svg(root, path)


def render_sentence_bars(sentence_scores, path) -> None:
    """Bar chart of sentence relevancy, ascending score left to right."""
    scores = np.asarray(sentence_scores, dtype=float)
    if scores.size == 0:
        raise ValueError("need at least one sentence score")
    order = sorted(range(scores.size), key=lambda i: (scores[i], i))
    alphas, all_zero = _alphas(scores)
    bar_w, gap, pad, chart_h, label_h = 34, 8, 10, 120, 18
    width = pad * 2 + scores.size * (bar_w + gap) - gap
    height = pad * 2 + chart_h + label_h
    root = _svg(width, height, _ZERO_WARNING if all_zero else None)
    top = scores.max()
    for slot, idx in enumerate(order):
        frac = scores[idx] / top if top > 0 else _MIN_ALPHA
        bar_h = max(1.0, frac * chart_h)
        x = pad + slot * (bar_w + gap)
        ET.SubElement(root, "rect", {
            "x": f"{x}", "y": f"{pad + chart_h - bar_h:.2f}",
            "width": f"{bar_w}", "height": f"{bar_h:.2f}",
            "fill": _ACCENT, "fill-opacity": "0.85",
        })
        label = ET.SubElement(root, "text", {
            "x": f"{x + bar_w / 2}", "y": f"{pad + chart_h + 14}",
            "text-anchor": "middle",
            "font-family": "monospace", "font-size": "12",
        })
        label.text = f"s{idx}"
    _write_svg(root, path)


def render_heatmap(result, sample, out_dir) -> list:
    """All SVG views for one interpretation; returns written paths.

    Writes sentence_scores.svg plus sentence{i}_tokens.svg and
    sentence{i}_patches.svg for each selected sentence.
    """
    n = len(sample.sentences)
    if len(result.sentence_scores) != n:
        raise ValueError(
            f"result scores {len(result.sentence_scores)} sentences, "
            f"sample has {n}")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    chart = os.path.join(out_dir, "sentence_scores.svg")
    render_sentence_bars(result.sentence_scores, chart)
    paths.append(chart)
    for sel in result.selected:
        if not 0 <= sel.index < n:
            raise ValueError(f"selected sentence {sel.index} outside 0..{n - 1}")
        pair = sample.sentences[sel.index]
        if len(sel.token_scores) != len(pair.token_ids):
            raise ValueError(
                f"sentence {sel.index}: {len(sel.token_scores)} token scores "
                f"for {len(pair.token_ids)} tokens")
        labels = [f"t{t}" for t in pair.token_ids]
        tok_path = os.path.join(out_dir, f"sentence{sel.index:02d}_tokens.svg")
        render_token_strip(labels, sel.token_scores, tok_path)
        paths.append(tok_path)
        patch_path = os.path.join(out_dir,
                                  f"sentence{sel.index:02d}_patches.svg")
        render_patch_grid(pair.audio_patches, sel.patch_scores,
                          sel.patch_grid, patch_path)
        paths.append(patch_path)
    return paths


# ----- tables ---------------------------------------------------------------------


def write_metrics_csv(path, named_reports: dict) -> None:
    """One row per model: precision/recall/F1/accuracy and counts."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "precision", "recall", "f1", "accuracy",
                         "tp", "fp", "tn", "fn"])
        for name, report in named_reports.items():
            writer.writerow([
                name, f"{report.precision:.6f}", f"{report.recall:.6f}",
                f"{report.f1:.6f}", f"{report.accuracy:.6f}",
                report.tp, report.fp, report.tn, report.fn,
            ])


def write_predictions_csv(path, named_reports: dict) -> None:
    """One row per (model, sample) with the label and hard prediction."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "participant_id", "label", "prediction"])
        for name, report in named_reports.items():
            for pid, label, pred in report.predictions:
                writer.writerow([name, pid, label, pred])


# ----- figures --------------------------------------------------------------------


def metric_comparison_figure(named_reports: dict, path) -> None:
    """Grouped bars of precision/recall/F1 for each model, as PNG."""
    metrics = ("precision", "recall", "f1")
    names = list(named_reports)
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.8 / max(1, len(names))
    xs = np.arange(len(metrics))
    for i, name in enumerate(names):
        report = named_reports[name]
        values = [getattr(report, m) for m in metrics]
        ax.bar(xs + i * width, values, width, label=name)
    ax.set_xticks(xs + width * (len(names) - 1) / 2)
    ax.set_xticklabels(metrics)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score (positive class)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_METADATA)
    plt.close(fig)


def loss_curve_figure(named_histories: dict, path) -> None:
    """Training loss per logged step for each model, as PNG."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, records in named_histories.items():
        steps = [r["step"] for r in records]
        losses = [r["loss"] for r in records]
        ax.plot(steps, losses, label=name, linewidth=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_METADATA)
    plt.close(fig)
