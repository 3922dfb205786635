"""Independent reference implementations shared by the test modules."""

import numpy as np


def brute_auroc(s_in, s_out):
    wins = 0.0
    for a in s_in:
        for b in s_out:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(s_in) * len(s_out))


def histogram_ece(probs, labels, M=15):
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(float)
    N = len(conf)
    total = 0.0
    for k in range(M):
        lo, hi = k / M, (k + 1) / M
        sel = np.array([(c > lo or k == 0) and c <= hi for c in conf])
        if sel.any():
            total += (sel.sum() / N) * abs(correct[sel].mean() - conf[sel].mean())
    return total


def exhaustive_fpr95(s_in, s_out):
    best = None
    for t in sorted(set(s_in) | set(s_out)):
        if np.mean(s_in >= t) >= 0.95:
            best = t
    return float(np.mean(s_out >= best))


def random_probs(rng, J, N, C, temp=2.0):
    z = rng.normal(scale=temp, size=(J, N, C))
    e = np.exp(z - z.max(axis=2, keepdims=True))
    return e / e.sum(axis=2, keepdims=True)


def perturbed_family(seed, scales, J=4, width=16, scale=0.05):
    """Zero-mean member perturbations of one 2-layer ReLU net at each scale in ``scales``.

    Inputs are kept away from the hidden kinks so the averaging gap is the
    purely bilinear term. Returns ``(families, x)``.
    """
    rng = np.random.default_rng(seed)
    base = [(rng.normal(size=(5, width)) / np.sqrt(5), rng.normal(size=width) * 0.1),
            (rng.normal(size=(width, 3)) / np.sqrt(width), np.zeros(3))]
    pert = [[tuple(rng.normal(size=np.shape(a)) for a in layer) for layer in base] for _ in range(J)]
    mean = [tuple(sum(p[l][k] for p in pert) / J for k in range(2)) for l in range(2)]
    x = rng.normal(size=(2000, 5))
    pre = x @ base[0][0] + base[0][1]
    x = x[np.abs(pre).min(axis=1) > 0.3][:32]
    families = [[[tuple(base[l][k] + scale * t * (p[l][k] - mean[l][k]) for k in range(2)) for l in range(2)]
                 for p in pert] for t in scales]
    return families, x
