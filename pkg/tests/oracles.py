"""Independent reference computations used by the tests."""

import numpy as np

FD_STEP = 1e-5


def central_diff(f, x, h=FD_STEP):
    """Gradient of scalar ``f`` at ``x`` by central differences, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    """``||a - b|| / max(||a||, ||b||)``; 0 when both vanish."""
    a, b = np.ravel(a), np.ravel(b)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def brute_force_counts(preds, truths, n_classes):
    """Per-class TP/FP/FN by explicit loops over samples."""
    tp = [0] * n_classes
    fp = [0] * n_classes
    fn = [0] * n_classes
    support = [0] * n_classes
    for p, t in zip(preds, truths):
        support[t] += 1
        if p == t:
            tp[t] += 1
        else:
            fp[p] += 1
            fn[t] += 1
    return tp, fp, fn, support


def brute_force_metrics(preds, truths, n_classes):
    tp, fp, fn, support = brute_force_counts(preds, truths, n_classes)
    n = len(truths)

    def ratio(a, b):
        return a / b if b else 0.0

    prec = [ratio(tp[i], tp[i] + fp[i]) for i in range(n_classes)]
    rec = [ratio(tp[i], tp[i] + fn[i]) for i in range(n_classes)]
    f1 = [ratio(2 * tp[i], 2 * tp[i] + fp[i] + fn[i]) for i in range(n_classes)]
    return {
        "tp": tp, "fp": fp, "fn": fn, "support": support,
        "accuracy": sum(tp) / n,
        "weighted_precision": sum(support[i] / n * prec[i] for i in range(n_classes)),
        "weighted_recall": sum(support[i] / n * rec[i] for i in range(n_classes)),
        "weighted_f1": sum(support[i] / n * f1[i] for i in range(n_classes)),
        "per_class_f1": f1, "per_class_precision": prec, "per_class_recall": rec,
    }
