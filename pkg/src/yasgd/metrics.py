"""Per-iteration and per-evaluation CSV metrics."""

from __future__ import annotations

import csv
from typing import IO, Sequence

HEADER = ("epoch", "iter", "lr", "loss", "eval_acc", "imgs_per_sec")


def metrics_rows(iterations: Sequence, evals: Sequence) -> list[dict]:
    """One row per training iteration plus one per evaluation, in run order.

    An evaluation row follows the last iteration of its epoch and leaves
    the training columns empty.
    """
    rows = []
    pending = sorted(evals, key=lambda e: e.iteration)
    k = 0
    for rec in iterations:
        while k < len(pending) and pending[k].iteration < rec.iteration:
            rows.append(_eval_row(pending[k]))
            k += 1
        rows.append({"epoch": rec.epoch, "iter": rec.iteration, "lr": repr(rec.lr), "loss": repr(rec.loss),
                     "eval_acc": "", "imgs_per_sec": f"{rec.imgs_per_sec:.1f}"})
    rows.extend(_eval_row(e) for e in pending[k:])
    return rows


def _eval_row(e) -> dict:
    return {"epoch": e.epoch, "iter": e.iteration, "lr": "", "loss": "", "eval_acc": repr(e.accuracy),
            "imgs_per_sec": ""}


def metrics_csv(result, fp: IO[str]) -> int:
    """Write the metrics of a run (anything with ``iterations`` and ``evals``); returns the data row count."""
    rows = metrics_rows(result.iterations, result.evals)
    writer = csv.DictWriter(fp, fieldnames=HEADER, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return len(rows)
