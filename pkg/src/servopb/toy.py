"""Scalar regime family for validating premise learning end to end.

The system s_{t+1} = a_k * s_t + 0.5 * u_t with per-regime gain a_k is
the smallest dynamics where a premise vector has something real to
encode.  The gains admit an exact least-squares recovery from logged
pairs, giving an oracle ordering to hold learned PBs against.
"""

from __future__ import annotations

import numpy as np

from .rng import substream

__all__ = ["fit_regime_gains", "make_toy_dataset"]


def make_toy_dataset(gains=(0.5, 0.9, 1.3), n_per_regime: int = 4,
                     ticks: int = 16, seed: int = 0):
    """Returns (s (B,T,1), u (B,T,1), k (B,), names).

    Commands apply mild stabilizing feedback plus noise so every
    regime, including the expanding one, stays bounded over the
    episode while the pair stream still pins down a_k exactly.
    """
    s_seqs, u_seqs, ks = [], [], []
    for ki, a in enumerate(gains):
        for n in range(n_per_regime):
            rng = substream(seed, "toy", str(ki), str(n))
            s = np.empty(ticks)
            u = np.empty(ticks)
            s[0] = rng.uniform(-0.5, 0.5)
            for t in range(ticks - 1):
                u[t] = np.clip(-0.8 * s[t] + rng.uniform(-0.4, 0.4), -1.0, 1.0)
                s[t + 1] = a * s[t] + 0.5 * u[t]
            u[ticks - 1] = np.clip(-0.8 * s[ticks - 1] + rng.uniform(-0.4, 0.4),
                                   -1.0, 1.0)
            s_seqs.append(s[:, None])
            u_seqs.append(u[:, None])
            ks.append(ki)
    names = [f"regime-{a}" for a in gains]
    return (np.stack(s_seqs), np.stack(u_seqs),
            np.array(ks, dtype=np.int64), names)


def fit_regime_gains(s: np.ndarray, u: np.ndarray, k: np.ndarray,
                     n_regimes: int) -> np.ndarray:
    """Exact per-regime gain from least squares on logged transitions.

    Solves min_a sum (s_{t+1} - a s_t - 0.5 u_t)^2 per regime; with
    noiseless data this recovers the generating gain to machine
    precision, independent of any learned model.
    """
    out = np.empty(n_regimes)
    for ki in range(n_regimes):
        rows = np.nonzero(k == ki)[0]
        if rows.size == 0:
            raise ValueError(f"regime {ki} has no sequences")
        st = s[rows, :-1, 0].ravel()
        ut = u[rows, :-1, 0].ravel()
        s1 = s[rows, 1:, 0].ravel()
        denom = float(st @ st)
        if denom == 0.0:
            raise ValueError(f"regime {ki} has degenerate state stream")
        out[ki] = float(st @ (s1 - 0.5 * ut)) / denom
    return out
