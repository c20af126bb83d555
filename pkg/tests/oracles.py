"""Independent reference implementations used as test oracles.

These are deliberately naive: plain Python loops, exact or high-precision
arithmetic, and no shared code with the package.
"""

import math
from fractions import Fraction

import mpmath

mpmath.mp.dps = 50


def percentile_threshold(values, p):
    """Nearest-rank threshold: ascending-sort element at index floor(p*D/100)."""
    ordered = sorted(values)
    index = (Fraction(p) * len(ordered)) // 100
    return ordered[min(int(index), len(ordered) - 1)]


def ash_literal(values, p, variant):
    """Line-by-line transcription of the three activation shaping procedures."""
    F = [float(v) for v in values]
    t = percentile_threshold(F, p)
    if variant == "p":
        FP = list(F)
        for i in range(len(FP)):
            if F[i] < t:
                FP[i] = 0.0
        return FP
    if variant == "b":
        s = math.fsum(F)
        FP = [0.0 if f < t else f for f in F]
        n = len([i for i in range(len(FP)) if FP[i] != 0])
        if n == 0:
            return [0.0] * len(F)
        return [s / n if f != 0 else 0.0 for f in FP]
    if variant == "s":
        s1 = mpmath.fsum(F)
        FP = [0.0 if f < t else f for f in F]
        s2 = mpmath.fsum(FP)
        if s2 == 0:
            return [0.0] * len(F)
        scale = mpmath.exp(s1 / s2)
        return [float(mpmath.mpf(f) * scale) for f in FP]
    raise ValueError(variant)


def logsumexp_mp(values, epsilon=1.0):
    eps = mpmath.mpf(epsilon)
    return eps * mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(v) / eps) for v in values))


def cross_entropy_mp(values, target):
    return logsumexp_mp(values) - mpmath.mpf(values[target])


def auroc_pairs(id_scores, ood_scores):
    """O(n*m) count of ID>OOD pairs with ties counted half, as an exact fraction."""
    wins = Fraction(0)
    for a in id_scores:
        for b in ood_scores:
            if a > b:
                wins += 1
            elif a == b:
                wins += Fraction(1, 2)
    return wins / (len(id_scores) * len(ood_scores))


def sweep_operating_point(id_scores, ood_scores, target=0.95):
    """Try every distinct score as threshold; keep the largest with TPR >= target."""
    best = None
    for theta in sorted(set(id_scores) | set(ood_scores)):
        tpr = Fraction(sum(1 for s in id_scores if s >= theta), len(id_scores))
        if tpr >= Fraction(target).limit_denominator(10**6):
            fpr = Fraction(sum(1 for s in ood_scores if s >= theta), len(ood_scores))
            best = (theta, tpr, fpr)
    return best


def normalized_adjacency(adj):
    """Symmetric degree normalization with plain loops; zero-degree rows stay zero."""
    v = len(adj)
    deg = [sum(adj[i]) for i in range(v)]
    out = [[0.0] * v for _ in range(v)]
    for i in range(v):
        for j in range(v):
            if adj[i][j] and deg[i] and deg[j]:
                out[i][j] = adj[i][j] / math.sqrt(deg[i] * deg[j])
    return out


def temporal_conv_loops(x, kernel, stride=1):
    """Zero-padded 1-D correlation over a list, output length ceil(T/stride)."""
    k = len(kernel)
    pad = (k - 1) // 2
    padded = [0.0] * pad + list(x) + [0.0] * pad
    out = []
    for start in range(0, len(x), stride):
        out.append(sum(kernel[j] * padded[start + j] for j in range(k)))
    return out
