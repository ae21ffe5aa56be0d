"""Presentation-attack detection metrics.

Scores are "liveness": an item is accepted as live when ``score >= threshold``.
APCER is the fraction of attacks accepted, BPCER the fraction of live items
rejected, ACER their mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class EvalResult:
    scores: np.ndarray
    threshold: float
    apcer: float
    bpcer: float
    acer: float
    eer: float
    hter: float
    eer_threshold: float

    def row(self) -> dict:
        return {k: getattr(self, k) for k in ("threshold", "apcer", "bpcer", "acer", "eer", "hter")}


def _split(scores, is_live):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    is_live = np.asarray(is_live, dtype=bool).ravel()
    if scores.shape != is_live.shape:
        raise ValueError(f"got {scores.size} scores for {is_live.size} labels")
    live, spoof = np.sort(scores[is_live]), np.sort(scores[~is_live])
    if live.size == 0 or spoof.size == 0:
        raise ValueError("metrics need at least one live and one spoof item")
    return live, spoof


def error_rates(scores, is_live, threshold):
    """(APCER, BPCER) at one threshold, or arrays of them for many."""
    live, spoof = _split(scores, is_live)
    t = np.asarray(threshold, dtype=np.float64)
    apcer = (spoof.size - np.searchsorted(spoof, t, side="left")) / spoof.size
    bpcer = np.searchsorted(live, t, side="left") / live.size
    return apcer, bpcer


def candidate_thresholds(scores) -> np.ndarray:
    """Every distinct operating point: midpoints between sorted distinct scores,
    plus one threshold below and one above all scores."""
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2
    return np.concatenate([[u[0] - 1.0], mids, [u[-1] + 1.0]])


def eer(scores, is_live) -> tuple[float, float]:
    """Equal error rate and its threshold.

    Among thresholds minimising |APCER - BPCER| the lowest one is taken and
    the mean of the two rates there is reported. Without ties across classes
    the two rates then differ by at most 1/min(#live, #spoof).
    """
    ts = candidate_thresholds(scores)
    a, b = error_rates(scores, is_live, ts)
    k = int(np.argmin(np.abs(a - b)))
    return float((a[k] + b[k]) / 2), float(ts[k])


def compute_metrics(scores, is_live, threshold="eer", dev_scores=None, dev_is_live=None) -> EvalResult:
    """APCER/BPCER/ACER at ``threshold``; EER on this set; HTER at the dev threshold.

    ``threshold`` is a number, ``"eer"`` (this set's EER threshold) or
    ``"dev-set"`` (the EER threshold of ``dev_scores``). HTER always uses
    the dev-set threshold when dev data is given, else the chosen threshold.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    e, e_thr = eer(scores, is_live)
    dev_thr = None
    if dev_scores is not None:
        _, dev_thr = eer(dev_scores, dev_is_live)
    if threshold == "eer":
        t = e_thr
    elif threshold == "dev-set":
        if dev_thr is None:
            raise ValueError("threshold='dev-set' needs dev_scores and dev_is_live")
        t = dev_thr
    elif isinstance(threshold, str):
        raise ValueError(f"threshold must be a number, 'eer' or 'dev-set', got {threshold!r}")
    else:
        t = float(threshold)
    apcer, bpcer = (float(v) for v in error_rates(scores, is_live, t))
    ha, hb = (apcer, bpcer) if dev_thr is None else error_rates(scores, is_live, dev_thr)
    return EvalResult(
        scores=scores, threshold=t, apcer=apcer, bpcer=bpcer, acer=(apcer + bpcer) / 2,
        eer=e, hter=float((ha + hb) / 2), eer_threshold=e_thr,
    )
