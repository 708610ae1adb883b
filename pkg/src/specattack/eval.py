"""Robustness metrics and report emission.

The fooling-rate AUC is the trapezoidal area under the curve of attack
success rate against budget, with budgets min-max mapped onto [0, 1].
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .signal import DegenerateInputError

ATTACK_ORDER = ("FGSM", "DeepFool", "BIM-a", "BIM-b", "JSMA", "CWA", "L-BFGS")
AUC_DEFINITION = (
    "trapezoidal area under success rate vs. budget, budgets sorted ascending and "
    "min-max mapped onto [0, 1]"
)


# ---------------------------------------------------------------------------
# metrics


def fooling_curve(outcomes):
    """Sorted (budgets, success rates) for one attack's outcomes."""
    by = {}
    for o in outcomes:
        by.setdefault(float(o.budget), []).append(bool(o.success))
    budgets = np.array(sorted(by))
    rates = np.array([np.mean(by[b]) for b in budgets])
    return budgets, rates


def fooling_auc(budgets, rates) -> float:
    """Trapezoidal AUC of ``rates`` over budgets normalized to [0, 1]."""
    b = np.asarray(budgets, dtype=float)
    r = np.asarray(rates, dtype=float)
    if b.shape != r.shape:
        raise ValueError("budgets and rates differ in length")
    order = np.argsort(b, kind="stable")
    b, r = b[order], r[order]
    if np.unique(b).size < 2:
        raise DegenerateInputError("fooling AUC needs at least two distinct budgets")
    if np.any((r < 0) | (r > 1)):
        raise ValueError("rates must lie in [0, 1]")
    x = (b - b[0]) / (b[-1] - b[0])
    return float(np.clip(np.trapezoid(r, x), 0.0, 1.0))


def auc_from_outcomes(outcomes):
    """(auc, flag).  A single budget yields the raw success rate flagged 'single-budget'."""
    budgets, rates = fooling_curve(outcomes)
    if budgets.size == 0:
        return None, "no-outcomes"
    try:
        return fooling_auc(budgets, rates), None
    except DegenerateInputError:
        return float(rates[0]), "single-budget"


def cost_summary(outcomes) -> dict:
    """{attack: (mean, median)} of gradient cost in batch units."""
    outcomes = list(outcomes)
    if not outcomes:
        raise ValueError("cost summary needs at least one outcome")
    by = {}
    for o in outcomes:
        by.setdefault(o.algorithm, []).append(o.gradient_cost)
    return {k: (float(np.mean(v)), float(np.median(v))) for k, v in by.items()}


@dataclass
class TransferMatrix:
    models: list
    entries: list  # rows of floats or None

    def to_dict(self):
        return {"models": list(self.models), "entries": [list(r) for r in self.entries]}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["models"]), [list(r) for r in d["entries"]])

    def array(self):
        return np.array([[np.nan if v is None else v for v in r] for r in self.entries])


def transfer_matrix(models, sources, names=None) -> TransferMatrix:
    """Fraction of model-i adversarial examples (successful on i) that model j misclassifies.

    ``sources[i]`` is ``(x_adv, labels, success)`` for attacks run against
    ``models[i]``.  The diagonal is 1 by construction; rows without any
    successful example are ``None`` off the diagonal.
    """
    if len(models) < 2:
        raise ValueError("transfer matrix needs at least two models")
    if len(sources) != len(models):
        raise ValueError("one source set per model is required")
    k = len(models)
    names = list(names) if names is not None else [f"model{i}" for i in range(k)]
    rows = []
    for i, (x_adv, labels, success) in enumerate(sources):
        ok = np.asarray(success, dtype=bool)
        xs = np.asarray(x_adv)[ok]
        ls = np.asarray(labels)[ok]
        row = []
        for j, model in enumerate(models):
            if i == j:
                row.append(1.0)
            elif ok.sum() == 0:
                row.append(None)
            else:
                pred, _ = model.predict(xs)
                row.append(float(np.mean(pred != ls)))
        rows.append(row)
    return TransferMatrix(names, rows)


# ---------------------------------------------------------------------------
# report


@dataclass
class AttackCell:
    attack: str
    auc: float | None = None
    auc_flag: str | None = None
    mean_cost: float | None = None
    median_cost: float | None = None
    max_budget_success: float | None = None
    samples: int = 0

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class ReportRow:
    dataset: str
    representation: str
    config: str
    accuracy: float | None
    cells: list = field(default_factory=list)

    def cell(self, attack):
        for c in self.cells:
            if c.attack == attack:
                return c
        return None

    def to_dict(self):
        return {
            "dataset": self.dataset,
            "representation": self.representation,
            "config": self.config,
            "accuracy": self.accuracy,
            "cells": [c.to_dict() for c in self.cells],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["dataset"], d["representation"], d["config"], d["accuracy"], [AttackCell(**c) for c in d["cells"]])


@dataclass
class RobustnessReport:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    transfer: dict | None = None

    def to_dict(self):
        meta = dict(self.metadata)
        meta.setdefault("auc_definition", AUC_DEFINITION)
        return {"metadata": meta, "rows": [r.to_dict() for r in self.rows], "transfer": self.transfer}

    @classmethod
    def from_dict(cls, d):
        return cls([ReportRow.from_dict(r) for r in d["rows"]], dict(d["metadata"]), d.get("transfer"))


def attack_cells(outcomes) -> list:
    """One :class:`AttackCell` per attack present, in table order."""
    by = {}
    for o in outcomes:
        by.setdefault(o.algorithm, []).append(o)
    cells = []
    for name in sorted(by, key=lambda a: (ATTACK_ORDER.index(a) if a in ATTACK_ORDER else len(ATTACK_ORDER), a)):
        group = by[name]
        auc, flag = auc_from_outcomes(group)
        mean, median = cost_summary(group)[name]
        top = max(o.budget for o in group)
        at_top = [o.success for o in group if o.budget == top]
        cells.append(
            AttackCell(
                attack=name,
                auc=auc,
                auc_flag=flag,
                mean_cost=mean,
                median_cost=median,
                max_budget_success=float(np.mean(at_top)),
                samples=len({o.sample_index for o in group}),
            )
        )
    return cells


def report_json(report: RobustnessReport) -> str:
    """Canonical JSON text: sorted keys, fixed indentation, no NaN."""
    return json.dumps(report.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"


def parse_report(text: str) -> RobustnessReport:
    return RobustnessReport.from_dict(json.loads(text))


def _num(v):
    if v is None:
        return "null"
    if float(v).is_integer():
        return str(int(v))
    return f"{v:.2f}"


def format_cell(cell: AttackCell | None) -> str:
    """Table-style "AUC, gradients" pair, e.g. ``0.9822, 1``."""
    if cell is None:
        return ""
    auc = "null" if cell.auc is None else f"{cell.auc:.4f}"
    return f"{auc}, {_num(cell.mean_cost)}"


def report_csv(report: RobustnessReport) -> str:
    attacks = list(ATTACK_ORDER)
    for r in report.rows:
        for c in r.cells:
            if c.attack not in attacks:
                attacks.append(c.attack)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "representation", "config", "accuracy"] + attacks)
    for r in report.rows:
        acc = "null" if r.accuracy is None else f"{r.accuracy:.2f}"
        w.writerow([r.dataset, r.representation, r.config, acc] + [format_cell(r.cell(a)) for a in attacks])
    return buf.getvalue()


def emit_report(report: RobustnessReport, out_dir, formats=("json", "csv")) -> list:
    """Write report.json and/or report.csv into ``out_dir``; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for fmt in formats:
        fmt = fmt.lower()
        if fmt == "json":
            p = out_dir / "report.json"
            p.write_text(report_json(report), encoding="utf-8")
        elif fmt == "csv":
            p = out_dir / "report.csv"
            p.write_text(report_csv(report), encoding="utf-8")
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# plots (hand-written SVG, no plotting dependency)


def _slug(*parts):
    s = "_".join(parts)
    return "".join(ch if ch.isalnum() or ch in "-." else "_" for ch in s)


def plot_svg(row: ReportRow) -> str:
    """Bar chart of mean gradient cost (log scale) with AUC markers for one config."""
    W, H, pad = 640, 360, 60
    cells = [c for c in row.cells if c.mean_cost is not None]
    n = max(1, len(cells))
    bw = (W - 2 * pad) / n
    top = max([math.log10(1 + c.mean_cost) for c in cells] + [1.0])
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<text x="{W / 2}" y="24" text-anchor="middle" class="title" data-accuracy="{row.accuracy!r}">'
        f"{escape(row.dataset)} / {escape(row.representation)} / {escape(row.config)}: accuracy {row.accuracy!r} %</text>",
        f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
    ]
    for i, c in enumerate(cells):
        h = (H - 2 * pad) * math.log10(1 + c.mean_cost) / top
        x = pad + i * bw + 0.15 * bw
        out.append(
            f'<rect x="{x:.2f}" y="{H - pad - h:.2f}" width="{0.7 * bw:.2f}" height="{h:.2f}" fill="#4c72b0"/>'
        )
        cx = pad + (i + 0.5) * bw
        out.append(f'<text x="{cx:.2f}" y="{H - pad + 16}" text-anchor="middle" class="attack">{escape(c.attack)}</text>')
        out.append(
            f'<text x="{cx:.2f}" y="{H - pad - h - 6:.2f}" text-anchor="middle" class="cost" '
            f'data-attack="{escape(c.attack)}">{c.mean_cost!r}</text>'
        )
        if c.auc is not None:
            ay = H - pad - (H - 2 * pad) * c.auc
            out.append(f'<circle cx="{cx:.2f}" cy="{ay:.2f}" r="4" fill="#dd8452"/>')
            out.append(
                f'<text x="{cx + 8:.2f}" y="{ay - 6:.2f}" class="auc" data-attack="{escape(c.attack)}">{c.auc!r}</text>'
            )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plots(report: RobustnessReport, out_dir) -> list:
    """One SVG per report row; an empty report writes nothing."""
    paths = []
    if not report.rows:
        return paths
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for r in report.rows:
        p = out_dir / (_slug(r.dataset, r.representation, r.config) + ".svg")
        p.write_text(plot_svg(r), encoding="utf-8")
        paths.append(p)
    return paths
