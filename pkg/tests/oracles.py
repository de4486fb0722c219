"""Independent reference computations shared by the unit and acceptance tests.

Each one is written the slow, obvious way so it shares no code path with the
library function it checks.
"""

import math

import numpy as np

from slfc.model import decode, mixture_action_density, prior, skill_heads


def trapezoid_auc(scales, rates):
    s, r = list(map(float, scales)), list(map(float, rates))
    area = sum((s[i + 1] - s[i]) * (r[i] + r[i + 1]) / 2 for i in range(len(s) - 1))
    return area / (s[-1] - s[0])


def brute_frechet(a, b):
    """Minimum over every monotone coupling of the maximum pair distance."""
    n, m = len(a), len(b)
    d = np.linalg.norm(a[:, None] - b[None], axis=-1)
    best = np.inf

    def walk(i, j, worst):
        nonlocal best
        worst = max(worst, d[i, j])
        if worst >= best:
            return
        if i == n - 1 and j == m - 1:
            best = worst
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < n and j + dj < m:
                walk(i + di, j + dj, worst)

    walk(0, 0, 0.0)
    return best


def brute_posterior(z, u, p):
    """Prior times per-skill likelihood in linear space, then normalized."""
    h = skill_heads(z[None], p)
    pri = np.exp(h.log_prior[0])
    lik = np.array(
        [
            np.prod(np.exp(-0.5 * (u - m) ** 2 / v) / np.sqrt(2 * np.pi * v))
            for m, v in zip(h.action_mean[0], h.action_var[0])
        ]
    )
    w = pri * lik
    return w / w.sum(), np.log(w.sum())


def log_evidence_quadrature(o, u, p, n_grid=20001):
    """log ∫ p(z) p(o|z) Σ_c π(c|z) p(u|c,z) dz on a 1-D trapezoid grid."""
    pr = prior(p)
    m, s = float(pr.mean[0]), math.sqrt(float(pr.var[0]))
    z = np.linspace(m - 12 * s, m + 12 * s, n_grid)[:, None]
    log_pz = -0.5 * ((z[:, 0] - m) / s) ** 2 - math.log(s) - 0.5 * math.log(2 * math.pi)
    dec = decode(z, p)
    log_po = np.sum(-0.5 * (o - dec.mean) ** 2 / dec.var - 0.5 * np.log(2 * math.pi * dec.var), axis=-1)
    log_pu = mixture_action_density(z, np.tile(u, (n_grid, 1)), p)
    f = log_pz + log_po + log_pu
    top = f.max()
    w = np.exp(f - top)
    dz = z[1, 0] - z[0, 0]
    return top + math.log(dz * (w.sum() - 0.5 * (w[0] + w[-1])))


def linear_data(A, B, n, rng):
    Z = rng.normal(size=(n, A.shape[0]))
    U = rng.normal(size=(n, B.shape[1]))
    return Z, U, Z @ A.T + U @ B.T


def randomize(params, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    return params.with_arrays({k: v + scale * rng.normal(size=v.shape) for k, v in params.arrays.items()})
