"""Sinusoid-bank identification from sampled injection profiles.

Fits  y(t) ~ offset + sum_k A_k sin(w_k t + phi_k)  by greedy frequency
search (periodogram peak, then local grid refinement) with a linear
least-squares solve for the in-phase/quadrature coefficients at each stage.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

__all__ = ["SinusoidBankParams", "FitError", "fit_sinusoid_bank", "load_injection_csv"]


class FitError(RuntimeError):
    pass


@dataclass
class SinusoidBankParams:
    offset: float
    components: list  # (amplitude, angular frequency, phase) triples
    rms_residual: float

    def evaluate(self, t):
        t = np.asarray(t, dtype=float)
        y = np.full_like(t, self.offset)
        for a, w, p in self.components:
            y = y + a * np.sin(w * t + p)
        return y


def _design(t, freqs):
    cols = [np.ones_like(t)]
    for w in freqs:
        cols.append(np.sin(w * t))
        cols.append(np.cos(w * t))
    return np.column_stack(cols)


def _lstsq(t, y, freqs):
    X = _design(t, freqs)
    cond = np.linalg.cond(X)
    if cond > 1e10:
        raise FitError(f"rank-deficient sinusoid fit (condition number {cond:.2e}); "
                       "frequencies too close or series too short")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    return coef, float(np.sqrt(np.mean(resid ** 2))), resid


def _refine_frequency(t, y, fixed_freqs, w0, dw):
    # shrink a local grid around the periodogram peak, scoring candidates by
    # the exact least-squares residual with all components refit
    def score(w):
        try:
            _, rms, _ = _lstsq(t, y, fixed_freqs + [w])
        except FitError:
            return np.inf
        return rms

    w = w0
    span = dw
    for _ in range(60):
        grid = w + span * np.linspace(-1.0, 1.0, 9)
        grid = grid[grid > 0]
        scores = [score(g) for g in grid]
        w = grid[int(np.argmin(scores))]
        span *= 0.4
        if span < 1e-13 * max(w, 1.0):
            break
    return w


def fit_sinusoid_bank(t, y, n_components=2):
    """Identify offset + n_components sinusoids from a uniformly sampled series."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.ndim != 1 or t.shape != y.shape:
        raise ValueError("t and y must be equal-length 1-D arrays")
    if t.size < 4 * n_components:
        raise FitError(f"need at least {4 * n_components} samples for {n_components} components")
    dt = np.diff(t)
    if np.any(dt <= 0) or np.max(np.abs(dt - dt[0])) > 1e-9 * max(dt[0], 1e-12):
        raise ValueError("series must be uniformly sampled with increasing time")

    freqs = []
    coef, rms, resid = _lstsq(t, y, freqs)
    for _ in range(n_components):
        # periodogram of the current residual on a zero-padded FFT grid
        npad = 8 * t.size
        spec = np.abs(np.fft.rfft(resid - np.mean(resid), n=npad))
        fgrid = 2.0 * np.pi * np.fft.rfftfreq(npad, d=dt[0])
        k = int(np.argmax(spec[1:])) + 1
        if spec[k] < 1e-12 * max(np.max(spec), 1.0) or fgrid[k] == 0.0:
            freqs.append(0.0 if not freqs else freqs[-1] * 1.5)  # degenerate leftover
            freqs[-1] = max(freqs[-1], 2.0 * np.pi / (t[-1] - t[0]))
        else:
            w = _refine_frequency(t, y, freqs, fgrid[k], fgrid[1])
            freqs.append(w)
        coef, rms, resid = _lstsq(t, y, freqs)

    # joint polish: coordinate sweeps remove the greedy stage's cross-talk
    if len(freqs) > 1:
        df = 2.0 * np.pi / (t[-1] - t[0])
        for _ in range(4):
            for i in range(len(freqs)):
                others = freqs[:i] + freqs[i + 1:]
                freqs[i] = _refine_frequency(t, y, others, freqs[i], 0.05 * df)
        coef, rms, resid = _lstsq(t, y, freqs)

    components = []
    for i, w in enumerate(freqs):
        s, c = coef[1 + 2 * i], coef[2 + 2 * i]
        amp = float(np.hypot(s, c))
        phase = float(np.arctan2(c, s))  # A sin(wt + phi) = s sin + c cos
        components.append((amp, float(w), phase))
    components.sort(key=lambda comp: -comp[0])
    return SinusoidBankParams(offset=float(coef[0]), components=components,
                              rms_residual=rms)


def load_injection_csv(path, s_base_mva=1000.0):
    """Read a two-column injection profile: time (s) and power.

    A header row is required; the power column may be named ``P_pu`` or
    ``P_MW`` (the latter is scaled by the power base).  Returns (t, P_pu).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 2:
            raise ValueError(f"{path}: missing header row with two columns")
        name = header[1].strip().lower()
        if name in ("p_pu", "p", "pu"):
            scale = 1.0
        elif name in ("p_mw", "mw"):
            scale = 1.0 / s_base_mva
        else:
            raise ValueError(f"{path}: power column must be named P_pu or P_MW, got {header[1]!r}")
        t, p = [], []
        for row in reader:
            if not row or not row[0].strip():
                continue
            t.append(float(row[0]))
            p.append(float(row[1]) * scale)
    t = np.asarray(t)
    p = np.asarray(p)
    if t.size < 2 or np.any(np.diff(t) <= 0):
        raise ValueError(f"{path}: time column must be strictly increasing with >= 2 samples")
    return t, p
