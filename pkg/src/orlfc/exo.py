"""Exosystem family generating the uncontrolled power injections.

Each area's injection is produced by a block-structured autonomous system
d' = S(d) with linear output P_d = Gamma d.  The catalog holds constant
offsets, 2-state rotations (sinusoids) and the logarithmic wind oscillator.
The first state of every area is its constant component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

__all__ = [
    "ConstantBlock",
    "RotationBlock",
    "WindBlock",
    "ExoModel",
    "ExoDomainError",
    "build_scenario1_exo",
    "build_scenario3_exo",
    "build_constant_exo",
    "bank_area_blocks",
    "wind_fixed_point",
    "exo_equilibrium_check",
]

_WIND_FLOOR = 1e-9


class ExoDomainError(ValueError):
    """Exosystem state left the admissible domain (wind log argument)."""


@dataclass(frozen=True)
class ConstantBlock:
    value: float
    sign: float = 1.0
    dim: int = 1

    def deriv(self, z):
        return np.zeros(1)

    def out_row(self):
        return np.array([self.sign])

    def initial(self):
        return np.array([float(self.value)])

    def rotate(self, z, psi):
        return z

    def frequency(self):
        return None


@dataclass(frozen=True)
class RotationBlock:
    """Planar rotation (p, q) with p' = w q, q' = -w p; output is p.

    With p(0) = a sin(phase), q(0) = a cos(phase) the output is
    a sin(w t + phase).
    """

    omega: float
    amplitude: float
    phase: float = 0.0
    sign: float = 1.0
    dim: int = 2

    def deriv(self, z):
        return np.array([self.omega * z[1], -self.omega * z[0]])

    def out_row(self):
        return np.array([self.sign, 0.0])

    def initial(self):
        return np.array([self.amplitude * math.sin(self.phase),
                         self.amplitude * math.cos(self.phase)])

    def rotate(self, z, psi):
        c, s = math.cos(psi), math.sin(psi)
        return np.array([z[0] * c + z[1] * s, z[1] * c - z[0] * s])

    def frequency(self):
        return float(self.omega)


@dataclass(frozen=True)
class WindBlock:
    """Conservative log-oscillator used for the renewable source.

    z1' =  z2 (k0 ln z2 - k0 h + s0^2/2)
    z2' = -z1 (k0 ln z1 - k0 h + s0^2/2)

    Both states must stay strictly positive.  The fixed point sits at
    z1 = z2 = exp(h - s0^2 / (2 k0)); ``deviation`` scales the initial radial
    offset of z1 from it.
    """

    kappa0: float
    s0: float
    h: float
    deviation: float = 0.0
    sign: float = 1.0
    dim: int = 2

    def fixed_point(self):
        return math.exp(self.h - self.s0 ** 2 / (2.0 * self.kappa0))

    def _bracket(self, z):
        if np.any(z <= _WIND_FLOOR):
            raise ExoDomainError(
                f"wind state left the positive domain (min {np.min(z):.3e})")
        return self.kappa0 * np.log(z) - self.kappa0 * self.h + self.s0 ** 2 / 2.0

    def deriv(self, z):
        g = self._bracket(z)
        return np.array([z[1] * g[1], -z[0] * g[0]])

    def out_row(self):
        return np.array([self.sign, 0.0])

    def initial(self):
        zs = self.fixed_point()
        return np.array([zs * (1.0 + self.deviation), zs])

    def rotate(self, z, psi):
        raise NotImplementedError("wind block has no analytic phase advance")

    def frequency(self):
        return None

    def invariant(self, z):
        """Conserved quantity G(z1) + G(z2) with G'(z) = z (k0 ln z - k0 h + s0^2/2)."""
        def G(z):
            return (self.kappa0 * z ** 2 * (2.0 * np.log(z) - 1.0) / 4.0
                    + (self.s0 ** 2 / 2.0 - self.kappa0 * self.h) * z ** 2 / 2.0)
        return float(G(z[0]) + G(z[1]))


def wind_fixed_point(kappa0, s0, h):
    return math.exp(h - s0 ** 2 / (2.0 * kappa0))


@dataclass
class ExoModel:
    """Composition of per-area block lists into one autonomous system."""

    areas: list  # list over areas of list of blocks

    dim: int = field(init=False)
    gamma: np.ndarray = field(init=False)

    def __post_init__(self):
        self.n = len(self.areas)
        slices = []
        pos = 0
        for blocks in self.areas:
            if not isinstance(blocks[0], ConstantBlock):
                raise ValueError("first block of each area must be the constant component")
            area_slices = []
            for blk in blocks:
                area_slices.append(slice(pos, pos + blk.dim))
                pos += blk.dim
            slices.append(area_slices)
        self.dim = pos
        self._slices = slices
        G = np.zeros((self.n, self.dim))
        for i, blocks in enumerate(self.areas):
            for blk, sl in zip(blocks, self._slices[i]):
                G[i, sl] = blk.out_row()
        self.gamma = G

    def initial_state(self):
        return np.concatenate([blk.initial() for blocks in self.areas for blk in blocks])

    def derivative(self, d):
        d = np.asarray(d, dtype=float)
        out = np.zeros(self.dim)
        for i, blocks in enumerate(self.areas):
            for blk, sl in zip(blocks, self._slices[i]):
                out[sl] = blk.deriv(d[sl])
        return out

    def output(self, d):
        return self.gamma @ np.asarray(d, dtype=float)

    def output_rate(self, d):
        """Gamma S(d), the time derivative of the injections."""
        return self.gamma @ self.derivative(d)

    def flow(self, d0, t, rtol=1e-11, atol=1e-12):
        """Advance the exosystem by t seconds (t may be negative)."""
        d0 = np.asarray(d0, dtype=float)
        if t == 0.0:
            return d0.copy()
        if self.is_rotational() or self._nonrotational_frozen(d0):
            return self._rotate_all(d0, t)
        sol = solve_ivp(lambda _, d: self.derivative(d), (0.0, t), d0,
                        method="RK45", rtol=rtol, atol=atol)
        if not sol.success:
            raise RuntimeError(f"exosystem flow failed: {sol.message}")
        return sol.y[:, -1]

    def is_rotational(self):
        """True when every time-varying block is a linear rotation."""
        return all(isinstance(b, (ConstantBlock, RotationBlock))
                   for blocks in self.areas for b in blocks)

    def is_effectively_rotational(self):
        """Like is_rotational, but wind blocks resting at their fixed point count
        as constants (their state never moves)."""
        return self._nonrotational_frozen(self.initial_state())

    def _nonrotational_frozen(self, d):
        d = np.asarray(d, dtype=float)
        for i, blocks in enumerate(self.areas):
            for blk, sl in zip(blocks, self._slices[i]):
                if isinstance(blk, (ConstantBlock, RotationBlock)):
                    continue
                scale = max(1.0, float(np.max(np.abs(d[sl]))))
                if np.max(np.abs(blk.deriv(d[sl]))) > 1e-9 * scale:
                    return False
        return True

    def _rotate_all(self, d, t):
        out = np.asarray(d, dtype=float).copy()
        for i, blocks in enumerate(self.areas):
            for blk, sl in zip(blocks, self._slices[i]):
                if isinstance(blk, RotationBlock):
                    out[sl] = blk.rotate(d[sl], blk.omega * t)
        return out

    def frequencies(self):
        """Sorted distinct angular frequencies of the rotation blocks."""
        freqs = sorted({round(b.frequency(), 12) for blocks in self.areas
                        for b in blocks if b.frequency() is not None})
        return [float(f) for f in freqs]

    def advance_group(self, d, freq, psi):
        """Rotate every block of the given frequency by phase psi."""
        out = np.asarray(d, dtype=float).copy()
        for i, blocks in enumerate(self.areas):
            for blk, sl in zip(blocks, self._slices[i]):
                if blk.frequency() is not None and abs(blk.frequency() - freq) < 1e-12:
                    out[sl] = blk.rotate(d[sl], psi)
        return out

    def equilibrium_state(self):
        """Fixed point: constants kept, rotations at the origin, wind at its center."""
        parts = []
        for blocks in self.areas:
            for blk in blocks:
                if isinstance(blk, ConstantBlock):
                    parts.append(blk.initial())
                elif isinstance(blk, RotationBlock):
                    parts.append(np.zeros(2))
                else:
                    zs = blk.fixed_point()
                    parts.append(np.array([zs, zs]))
        return np.concatenate(parts)

    def lipschitz_estimate(self, d0, radius=0.1, n_samples=64, seed=0):
        """Sampled bound on the Jacobian norm of S around d0."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(n_samples):
            d = d0 + radius * rng.standard_normal(self.dim)
            d = np.maximum(d, _WIND_FLOOR * 2) if self._has_wind() else d
            J = np.zeros((self.dim, self.dim))
            h = 1e-6
            for k in range(self.dim):
                e = np.zeros(self.dim)
                e[k] = h
                J[:, k] = (self.derivative(d + e) - self.derivative(d - e)) / (2 * h)
            worst = max(worst, float(np.linalg.norm(J, 2)))
        return worst

    def _has_wind(self):
        return any(isinstance(b, WindBlock) for blocks in self.areas for b in blocks)


def build_scenario1_exo(params, settings, proportional=True):
    """Wind + single-frequency load oscillators for the standard scenario.

    Load amplitudes follow the cost-weighted profile Q^-1 1 (normalized to
    ``load_amp_scale`` on average) so the injections stay shareable across
    areas; pass ``proportional=False`` to use the raw scale in every area.
    """
    n = params.n
    q = params.cost.q
    w = (1.0 / q) / np.sum(1.0 / q)
    if proportional:
        amps = settings["load_amp_scale"] * w / np.mean(w)
    else:
        amps = np.full(n, settings["load_amp_scale"])
    areas = []
    for i in range(n):
        zs = wind_fixed_point(settings["kappa0"][i], settings["s0"][i], settings["h"][i])
        const = settings["wind_level"][i] - zs - settings["load_mean"][i]
        areas.append([
            ConstantBlock(const),
            WindBlock(settings["kappa0"][i], settings["s0"][i], settings["h"][i],
                      deviation=settings.get("wind_deviation", 0.0), sign=+1.0),
            RotationBlock(settings["load_omega"], amps[i],
                          phase=settings.get("load_phase", 0.0), sign=-1.0),
        ])
    return ExoModel(areas)


def bank_area_blocks(load_offset, load_comps, wind_offset, wind_comps):
    blocks = [ConstantBlock(wind_offset - load_offset)]
    for a, wfreq, ph in wind_comps:
        blocks.append(RotationBlock(wfreq, a, phase=ph, sign=+1.0))
    for a, wfreq, ph in load_comps:
        blocks.append(RotationBlock(wfreq, a, phase=ph, sign=-1.0))
    return blocks


def build_scenario3_exo(params, banks=None):
    """Sinusoid-bank injections fitted to measured area profiles."""
    if banks is None:
        from .config import BANK_LOADS, BANK_WIND
        banks = {"loads": BANK_LOADS, "wind": BANK_WIND}
    wind_offset, wind_comps = banks["wind"]
    areas = []
    for area in range(1, params.n + 1):
        load_offset, load_comps = banks["loads"][area]
        areas.append(bank_area_blocks(load_offset, load_comps, wind_offset, wind_comps))
    return ExoModel(areas)


def build_constant_exo(P_d):
    """Frozen injections: one constant block per area."""
    return ExoModel([[ConstantBlock(float(v))] for v in np.asarray(P_d, dtype=float)])


@dataclass
class EquilibriumReport:
    stable: bool
    max_excursion: float
    max_recurrence: float
    escaped: bool


def exo_equilibrium_check(model, d_bar, radius, horizon, n_samples=8, seed=0,
                          rtol=1e-10, atol=1e-12):
    """Numeric surrogate for equilibrium stability of the exosystem.

    Integrates initial conditions sampled in a ball of the given radius and
    reports the largest excursion from the equilibrium and the largest
    distance-of-closest-return to the initial state over the second half of
    the horizon (a recurrence measure).  Escape beyond 10x the radius counts
    as unstable.
    """
    d_bar = np.asarray(d_bar, dtype=float)
    if np.max(np.abs(model.derivative(d_bar))) > 1e-10:
        raise ValueError("d_bar is not an equilibrium of the exosystem")
    rng = np.random.default_rng(seed)
    max_exc = 0.0
    max_rec = 0.0
    escaped = False
    for _ in range(n_samples):
        v = rng.standard_normal(model.dim)
        d0 = d_bar + radius * v / max(np.linalg.norm(v), 1e-12)
        sol = solve_ivp(lambda _, d: model.derivative(d), (0.0, horizon), d0,
                        method="RK45", rtol=rtol, atol=atol, dense_output=False,
                        t_eval=np.linspace(0.0, horizon, 400))
        dist = np.linalg.norm(sol.y - d_bar[:, None], axis=0)
        max_exc = max(max_exc, float(np.max(dist)))
        if np.max(dist) > 10.0 * radius:
            escaped = True
        back = np.linalg.norm(sol.y[:, sol.t > horizon / 2] - d0[:, None], axis=0)
        max_rec = max(max_rec, float(np.min(back)))
    return EquilibriumReport(stable=not escaped, max_excursion=max_exc,
                             max_recurrence=max_rec, escaped=escaped)
