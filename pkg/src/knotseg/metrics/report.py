"""Plain-text and CSV renderings of evaluation results."""
from __future__ import annotations

import csv
import io
import os
from typing import Iterable, Optional, Sequence

from ..binio import atomic_write
from .core import AggregateRow, VolumeMetrics, aggregate, kappa_distribution

SPECIES_COLUMNS = ("Method", "Species", "Dice", "HD", "Kappa")
TREE_COLUMNS = ("Method", "Tree", "Species", "Dice", "HD", "Kappa")


def _fmt(v: Optional[float], digits: int = 2) -> str:
    return "n/a" if v is None else f"{v:.{digits}f}"


def species_rows(method: str, metrics: Sequence[VolumeMetrics]) -> list[tuple[str, ...]]:
    rows = sorted(aggregate(metrics, "species"), key=lambda r: r.species)
    return [(method, r.species, _fmt(r.dice), _fmt(r.hd_mm), _fmt(r.kappa)) for r in rows]


def tree_rows(method: str, metrics: Sequence[VolumeMetrics]) -> list[tuple[str, ...]]:
    rows = sorted(aggregate(metrics, "tree"), key=lambda r: (r.species, int(r.group)))
    return [(method, r.group, r.species, _fmt(r.dice), _fmt(r.hd_mm), _fmt(r.kappa)) for r in rows]


def text_table(columns: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    rows = [tuple(map(str, r)) for r in rows]
    widths = [max([len(c)] + [len(r[i]) for r in rows]) for i, c in enumerate(columns)]
    line = lambda cells: "  ".join(c.ljust(w) if i < 2 else c.rjust(w)
                                   for i, (c, w) in enumerate(zip(cells, widths))).rstrip()
    out = [line(columns), "  ".join("-" * w for w in widths)]
    out += [line(r) for r in rows]
    return "\n".join(out) + "\n"


def csv_table(columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(rows)
    return buf.getvalue()


def volume_csv(metrics: Sequence[VolumeMetrics]) -> str:
    rows = [(m.species, m.tree_id, m.volume_index, repr(m.dice), "" if m.hd_mm is None else repr(m.hd_mm),
             repr(m.kappa)) for m in metrics]
    return csv_table(("species", "tree_id", "volume_index", "dice", "hd_mm", "kappa"), rows)


def kappa_csv(method: str, metrics: Sequence[VolumeMetrics]) -> str:
    rows = [(method, s, t, v, repr(k)) for s, t, v, k in kappa_distribution(metrics)]
    return csv_table(("method", "species", "tree_id", "volume_index", "kappa"), rows)


def write_reports(report_dir: str | os.PathLike, method: str, metrics: Sequence[VolumeMetrics]) -> dict[str, str]:
    """Write the species table, per-tree table, per-volume metrics and kappa distribution."""
    sp, tr = species_rows(method, metrics), tree_rows(method, metrics)
    excluded = sum(m.hd_excluded for m in metrics)
    note = f"\n{excluded} volume(s) excluded from HD (one of prediction / ground truth empty)\n" if excluded else ""
    files = {
        "table_species.txt": text_table(SPECIES_COLUMNS, sp) + note,
        "table_species.csv": csv_table(SPECIES_COLUMNS, sp),
        "table_trees.txt": text_table(TREE_COLUMNS, tr) + note,
        "table_trees.csv": csv_table(TREE_COLUMNS, tr),
        "volumes.csv": volume_csv(metrics),
        "kappa_distribution.csv": kappa_csv(method, metrics),
    }
    for name, text in files.items():
        atomic_write(os.path.join(report_dir, name), text.encode())
    return files
