"""Pixel-loop reference scores, written independently of the vectorized code."""

from __future__ import annotations


def brute_counts(pred, truth, threshold):
    tp = fp = fn = tn = 0
    for p, t in zip(pred.ravel().tolist(), truth.ravel().tolist()):
        pe, te = p >= threshold, t >= threshold
        if pe and te:
            tp += 1
        elif pe:
            fp += 1
        elif te:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def brute_scores(tp, fp, fn, tn):
    """POD, CSI, FBI and the standard HSS via the expected-correct form (None when undefined)."""
    n = tp + fp + fn + tn
    pod = tp / (tp + fn) if tp + fn else None
    csi = tp / (tp + fn + fp) if tp + fn + fp else None
    fbi = (tp + fp) / (tp + fn) if tp + fn else None
    expected = ((tp + fn) * (tp + fp) + (tn + fn) * (tn + fp)) / n
    hss = (tp + tn - expected) / (n - expected) if n != expected else None
    return {"POD": pod, "CSI": csi, "FBI": fbi, "HSS_standard": hss}
