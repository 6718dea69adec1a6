"""Per-run summaries and consolidated comparison tables.

Errors are reported in percent. Gain is the source-only mean error minus
the method's mean error, in percentage points.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

DETECTOR_WINDOW = 2


class ReportError(ValueError):
    pass


def detector_confusion(triggers, boundaries, n_batches: int, window: int = DETECTOR_WINDOW) -> dict:
    """Match detector firings to true domain boundaries.

    A boundary ``b`` counts as detected when some unused trigger lands in
    ``[b, b + window]``. Every trigger not matched to a boundary is false.
    """
    fired = [i for i, t in enumerate(triggers) if t]
    used = set()
    hits = 0
    for b in boundaries:
        for t in fired:
            if t not in used and b <= t <= b + window:
                used.add(t)
                hits += 1
                break
    false = len(fired) - len(used)
    return {
        "boundaries": len(boundaries),
        "detected": hits,
        "missed": len(boundaries) - hits,
        "triggers": len(fired),
        "false_triggers": false,
        "recall": hits / len(boundaries) if boundaries else float("nan"),
        "false_per_50": 50.0 * false / n_batches if n_batches else float("nan"),
        "window": window,
    }


def boundaries_of(domain_index) -> list[int]:
    d = list(domain_index)
    return [i for i in range(1, len(d)) if d[i] != d[i - 1]]


def summarize(rows: list[dict], rounds, source_errors, domains, extra: dict | None = None) -> dict:
    """Build the summary dict from per-batch rows (as logged) and the per-batch source errors.

    ``domains`` lists one ``(family, severity, round)`` per domain index.
    """
    err = np.array([r["batch_error"] for r in rows], dtype=np.float64)
    src = np.asarray(source_errors, dtype=np.float64)
    if len(err) == 0 or len(src) != len(err):
        raise ReportError("need one source error per adapted batch")
    dom_idx = np.array([r["domain_truth"] for r in rows])
    rounds = np.asarray(rounds)

    per_domain = []
    for d, (family, severity, round_) in enumerate(domains):
        mask = dom_idx == d
        if not mask.any():
            continue
        per_domain.append(
            {
                "index": d,
                "family": family,
                "severity": int(severity),
                "round": int(round_),
                "batches": int(mask.sum()),
                "error_pct": 100.0 * float(err[mask].mean()),
                "source_error_pct": 100.0 * float(src[mask].mean()),
            }
        )
    per_round = [
        {"round": int(r), "error_pct": 100.0 * float(err[rounds == r].mean()), "source_error_pct": 100.0 * float(src[rounds == r].mean())}
        for r in sorted(set(rounds.tolist()))
    ]
    mean = 100.0 * float(err.mean())
    src_mean = 100.0 * float(src.mean())
    out = {
        "batches": int(len(err)),
        "mean_error_pct": mean,
        "source_mean_error_pct": src_mean,
        "gain_pct": src_mean - mean,
        "domains": per_domain,
        "rounds": per_round,
        "detector": detector_confusion([r["shift_triggered"] for r in rows], boundaries_of(dom_idx), len(err)),
        "source_batch_errors": [float(v) for v in src],
    }
    if extra:
        out.update(extra)
    return out


def weighted_domain_mean(summary: dict) -> float:
    """Overall mean recomputed from the per-domain means weighted by batch count."""
    doms = summary["domains"]
    total = sum(d["batches"] for d in doms)
    return sum(d["error_pct"] * d["batches"] for d in doms) / total


def write_summary(path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def load_summary(run_dir) -> dict:
    path = Path(run_dir) / "summary.json"
    try:
        summary = json.loads(path.read_text())
    except FileNotFoundError:
        raise ReportError(f"{run_dir}: no summary.json (not a completed run)") from None
    except json.JSONDecodeError as exc:
        raise ReportError(f"{path}: malformed summary ({exc})") from None
    for key in ("mean_error_pct", "source_mean_error_pct", "domains", "rounds"):
        if key not in summary:
            raise ReportError(f"{path}: missing field {key!r}")
    return summary


# ------------------------------------------------------------------ tables


def _domain_label(d: dict, multi_round: bool) -> str:
    tag = f"{d['family']}@{d['severity']}"
    return f"r{d['round'] + 1}:{tag}" if multi_round else tag


def table_rows(named: list[tuple[str, dict]]) -> tuple[list[str], list[list]]:
    """Header plus one source row and one row per named summary."""
    if not named:
        raise ReportError("no runs to report")
    first = named[0][1]
    layout = [(d["family"], d["severity"], d["round"]) for d in first["domains"]]
    for name, s in named[1:]:
        if [(d["family"], d["severity"], d["round"]) for d in s["domains"]] != layout:
            raise ReportError(f"run {name!r} used a different domain sequence")
    multi = len({d["round"] for d in first["domains"]}) > 1
    header = ["method"] + [_domain_label(d, multi) for d in first["domains"]] + ["mean", "gain"]
    src_mean = first["source_mean_error_pct"]
    rows = [["source"] + [d["source_error_pct"] for d in first["domains"]] + [src_mean, 0.0]]
    for name, s in named:
        rows.append([name] + [d["error_pct"] for d in s["domains"]] + [s["mean_error_pct"], src_mean - s["mean_error_pct"]])
    return header, rows


def render_text(header, rows) -> str:
    cells = [header] + [[r[0]] + [f"{v:.2f}" for v in r[1:]] for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(header))]
    lines = []
    for k, c in enumerate(cells):
        lines.append("  ".join(v.ljust(widths[i]) if i == 0 else v.rjust(widths[i]) for i, v in enumerate(c)))
        if k == 0:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def render_csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in rows:
        writer.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
    return buf.getvalue()


def run_report_text(name: str, summary: dict) -> str:
    header, rows = table_rows([(name, summary)])
    text = render_text(header, rows)
    if len(summary["rounds"]) > 1:
        text += "\nper-round mean error (%)\n"
        for r in summary["rounds"]:
            text += f"  round {r['round'] + 1}: {r['error_pct']:.2f}  (source {r['source_error_pct']:.2f})\n"
    det = summary.get("detector")
    if det:
        text += (
            f"\nshift detector: {det['detected']}/{det['boundaries']} boundaries hit within "
            f"{det['window']} batches, {det['false_triggers']} false triggers "
            f"({det['false_per_50']:.2f} per 50 batches)\n"
        )
    return text


def consolidate(run_dirs) -> tuple[str, str]:
    """Text and CSV tables comparing completed runs against the shared source baseline."""
    named = []
    for d in run_dirs:
        named.append((Path(d).name, load_summary(d)))
    header, rows = table_rows(named)
    return render_text(header, rows), render_csv(header, rows)
