"""Plan-level metrics: success rate, mean accuracy and mean single IoU."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field


def _mean(values) -> float:
    # exactly rounded sum: the result does not depend on sample order
    values = list(values)
    return math.fsum(values) / len(values) if values else 0.0


def _pairs(preds, gts) -> tuple[list, list]:
    preds = [list(map(int, p)) for p in preds]
    gts = [list(map(int, g)) for g in gts]
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground-truth plans")
    for i, (p, g) in enumerate(zip(preds, gts)):
        if len(p) != len(g):
            raise ValueError(f"sample {i}: plan length {len(p)} != ground truth length {len(g)}")
    return preds, gts


def _position_accuracy(p, g) -> float:
    return sum(a == b for a, b in zip(p, g)) / len(g) if g else 1.0


def _siou(p, g) -> float:
    sp, sg = set(p), set(g)
    union = sp | sg
    return len(sp & sg) / len(union) if union else 1.0


def success_rate(preds, gts) -> float:
    """Fraction of plans matching the ground truth exactly, in order."""
    preds, gts = _pairs(preds, gts)
    return _mean(float(p == g) for p, g in zip(preds, gts))


def mean_accuracy(preds, gts) -> float:
    """Mean over samples of the fraction of positions predicted correctly."""
    preds, gts = _pairs(preds, gts)
    return _mean(_position_accuracy(p, g) for p, g in zip(preds, gts))


def mean_siou(preds, gts) -> float:
    """Mean over samples of |set(pred) & set(gt)| / |set(pred) | set(gt)|."""
    preds, gts = _pairs(preds, gts)
    return _mean(_siou(p, g) for p, g in zip(preds, gts))


def mean_set_accuracy(preds, gts) -> float:
    """Order-free accuracy: matched actions (multiset overlap) / plan length.

    Reported next to the position-wise mean accuracy for comparison only.
    """
    preds, gts = _pairs(preds, gts)
    return _mean(sum((Counter(p) & Counter(g)).values()) / len(g) if g else 1.0 for p, g in zip(preds, gts))


@dataclass
class EvalReport:
    n_samples: int
    sr: float
    macc: float
    msiou: float
    macc_set: float = float("nan")
    records: list[dict] = field(default_factory=list)

    def to_dict(self, include_records: bool = True) -> dict:
        d = {"n_samples": self.n_samples, "sr": self.sr, "macc": self.macc, "msiou": self.msiou,
             "macc_set": self.macc_set}
        if include_records:
            d["records"] = self.records
        return d


def evaluate(preds, gts) -> EvalReport:
    preds, gts = _pairs(preds, gts)
    records = []
    for i, (p, g) in enumerate(zip(preds, gts)):
        records.append({
            "index": i,
            "success": p == g,
            "accuracy": _position_accuracy(p, g),
            "siou": _siou(p, g),
        })
    return EvalReport(
        n_samples=len(preds),
        sr=success_rate(preds, gts),
        macc=mean_accuracy(preds, gts),
        msiou=mean_siou(preds, gts),
        macc_set=mean_set_accuracy(preds, gts),
        records=records,
    )
