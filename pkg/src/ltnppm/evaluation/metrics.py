"""Binary outcome metrics at a fixed 0.5 threshold."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

THRESHOLD = 0.5


@dataclass(frozen=True)
class MetricSet:
    accuracy: float
    f1: float
    support_positive: int
    support_negative: int
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(predictions, labels, average: str = "positive") -> MetricSet:
    """Accuracy and F1 of hard predictions ``truth >= 0.5``.

    ``average="positive"`` scores the positive class; ``"macro"`` averages
    both class F1s.  A class with no predicted and no true members has F1 0.
    """
    pred = np.asarray(predictions, dtype=float).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if pred.size == 0:
        raise ValueError("cannot score an empty prediction set")
    if pred.shape != y.shape:
        raise ValueError(f"{pred.size} predictions for {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary 0/1")
    hard = (pred >= THRESHOLD).astype(int)
    tp = int(((hard == 1) & (y == 1)).sum())
    fp = int(((hard == 1) & (y == 0)).sum())
    fn = int(((hard == 0) & (y == 1)).sum())
    tn = int(((hard == 0) & (y == 0)).sum())

    def f1(tp_, fp_, fn_):
        denom = 2 * tp_ + fp_ + fn_
        return 2 * tp_ / denom if denom else 0.0

    score = f1(tp, fp, fn)
    if average == "macro":
        score = 0.5 * (score + f1(tn, fn, fp))
    elif average != "positive":
        raise ValueError(f"unknown F1 average {average!r}")
    return MetricSet(
        accuracy=(tp + tn) / y.size,
        f1=score,
        support_positive=int((y == 1).sum()),
        support_negative=int((y == 0).sum()),
        tp=tp, fp=fp, fn=fn, tn=tn,
    )
