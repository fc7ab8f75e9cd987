"""Default four-area benchmark parameters and INI config handling.

The config file is a plain INI with sections [network], [cost], [comm],
[exo.wind], [exo.load], [exo.bank.<area>] and [sim].  Per-area values are
comma-separated lists ordered by area; edges are written ``i-j:value`` with
1-based node numbers.  ``write_default_config`` emits a file equivalent to
the built-in defaults.
"""

from __future__ import annotations

import configparser
import io
import math

import numpy as np

from .network import CostModel, NetworkParams

__all__ = [
    "default_network_params",
    "default_sim_settings",
    "load_config",
    "write_default_config",
    "parse_edges",
    "ConfigError",
]


class ConfigError(ValueError):
    """Malformed configuration file."""


# Four-area benchmark constants (per-area, ordered area 1..4).
_DEFAULTS = {
    "n": 4,
    "edges": "1-2:28.1, 1-4:22.8, 2-3:30.7, 3-4:17.9",
    "b_self": "-56.3, -58.5, -56.2, -49.4",
    "tau_v": "6.32, 6.63, 7.15, 6.46",
    "x_d": "1.76, 1.81, 1.87, 1.91",
    "x_d_prime": "0.27, 0.17, 0.23, 0.35",
    "e_field": "3.85, 4.43, 3.96, 3.88",
    "tau_p": "3.95, 4.71, 5.23, 4.17",
    "psi": "1.82, 1.61, 1.33, 1.55",
    "tau_c": "7.2, 6.8, 8.9, 7.8",
    "tau_delta": "0.23, 0.23, 0.23, 0.23",
    "xi": "0.73, 0.73, 0.73, 0.73",
    "omega_base": repr(120.0 * math.pi),
    "s_base_mva": "1000.0",
    "q": "0.95, 0.85, 1.2, 0.92",
    "r": "0, 0, 0, 0",
    "c": "0, 0, 0, 0",
    "comm_edges": "1-4, 2-3, 1-3, 3-4",
    # wind oscillator constants
    "kappa0": "-8.78, -8.82, -8.69, -8.58",
    "s0": "0.23, 0.24, 0.25, 0.21",
    "h": "9.63, 9.71, 9.59, 9.68",
    "wind_level": "0.05, 0.05, 0.05, 0.05",
    "wind_deviation": "0.0",
    # load oscillator: shared angular frequency, mean level, amplitude scale
    "load_omega": repr(2.0 * math.pi / 15.0),
    "load_mean": "0.30, 0.25, 0.35, 0.28",
    "load_amp_scale": "0.08",
    "load_phase": "0.0",
}

# Sinusoid-bank injections for the measured-data scenario: per area, the load
# is a constant offset plus two sinusoids (amplitude, angular frequency,
# phase); the renewable side is shared across areas.
BANK_LOADS = {
    1: (0.0375, [(11.88, 0.059, 0.89), (11.19, 0.063, 3.96)]),
    2: (0.05, [(0.814, 0.032, 1.27), (0.262, 0.121, 3.56)]),
    3: (0.0375, [(0.968, 0.016, 1.75), (0.211, 0.134, 3.28)]),
    4: (0.0125, [(1.129, 0.011, 0.65), (0.168, 0.209, 2.42)]),
}
BANK_WIND = (0.05, [(0.19, 0.007, 1.22), (0.071, 0.117, 1.26)])


def _floats(text):
    return np.array([float(tok) for tok in text.replace(";", ",").split(",") if tok.strip()])


def parse_edges(text, weighted=True):
    """Parse ``1-2:28.1, 1-4:22.8`` (or ``1-4, 2-3`` if unweighted) into 0-based tuples."""
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        if weighted:
            try:
                pair, val = tok.split(":")
                i, j = pair.split("-")
                out.append((int(i) - 1, int(j) - 1, float(val)))
            except ValueError as exc:
                raise ConfigError(f"bad weighted edge token {tok!r}") from exc
        else:
            try:
                i, j = tok.split("-")
                out.append((int(i) - 1, int(j) - 1))
            except ValueError as exc:
                raise ConfigError(f"bad edge token {tok!r}") from exc
    return tuple(out)


def _params_from_mapping(net, cost, comm):
    n = int(net["n"])
    return NetworkParams(
        n=n,
        edges=parse_edges(net["edges"], weighted=True),
        b_self=_floats(net["b_self"]),
        tau_p=_floats(net["tau_p"]),
        tau_v=_floats(net["tau_v"]),
        tau_c=_floats(net["tau_c"]),
        tau_delta=_floats(net["tau_delta"]),
        psi=_floats(net["psi"]),
        xi=_floats(net["xi"]),
        x_d=_floats(net["x_d"]),
        x_d_prime=_floats(net["x_d_prime"]),
        e_field=_floats(net["e_field"]),
        cost=CostModel(q=_floats(cost["q"]), r=_floats(cost["r"]), c=_floats(cost["c"])),
        comm_edges=parse_edges(comm["edges"], weighted=False),
        omega_base=float(net.get("omega_base", _DEFAULTS["omega_base"])),
        s_base_mva=float(net.get("s_base_mva", _DEFAULTS["s_base_mva"])),
    )


def default_network_params():
    """Shipped four-area benchmark network."""
    d = _DEFAULTS
    return _params_from_mapping(
        net=d,
        cost={"q": d["q"], "r": d["r"], "c": d["c"]},
        comm={"edges": d["comm_edges"]},
    )


def default_sim_settings():
    d = _DEFAULTS
    return {
        "kappa0": _floats(d["kappa0"]),
        "s0": _floats(d["s0"]),
        "h": _floats(d["h"]),
        "wind_level": _floats(d["wind_level"]),
        "wind_deviation": float(d["wind_deviation"]),
        "load_omega": float(d["load_omega"]),
        "load_mean": _floats(d["load_mean"]),
        "load_amp_scale": float(d["load_amp_scale"]),
        "load_phase": float(d["load_phase"]),
    }


def write_default_config(path_or_buf):
    cp = configparser.ConfigParser()
    d = _DEFAULTS
    cp["network"] = {k: d[k] for k in
                     ("n", "edges", "b_self", "tau_v", "x_d", "x_d_prime", "e_field",
                      "tau_p", "psi", "tau_c", "tau_delta", "xi", "omega_base", "s_base_mva")}
    cp["cost"] = {k: d[k] for k in ("q", "r", "c")}
    cp["comm"] = {"edges": d["comm_edges"]}
    cp["exo.wind"] = {k: d[k] for k in ("kappa0", "s0", "h", "wind_level", "wind_deviation")}
    cp["exo.load"] = {k: d[k] for k in ("load_omega", "load_mean", "load_amp_scale", "load_phase")}
    for area, (offset, comps) in BANK_LOADS.items():
        cp[f"exo.bank.load{area}"] = {
            "offset": repr(offset),
            "components": "; ".join(f"{a},{w},{p}" for a, w, p in comps),
        }
    cp["exo.bank.wind"] = {
        "offset": repr(BANK_WIND[0]),
        "components": "; ".join(f"{a},{w},{p}" for a, w, p in BANK_WIND[1]),
    }
    cp["sim"] = {
        "horizon": "200.0",
        "integrator": "rk45",
        "step": "1e-3",
        "rtol": "1e-8",
        "atol": "1e-10",
        "noise_std": "1e-3",
        "seed": "0",
    }
    if hasattr(path_or_buf, "write"):
        cp.write(path_or_buf)
    else:
        with open(path_or_buf, "w") as fh:
            cp.write(fh)


def load_config(path):
    """Read an INI config; returns (NetworkParams, exo settings dict, sim dict).

    Missing sections fall back to the shipped defaults, so a config file only
    needs the values it overrides.
    """
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path!r}")

    def section(name, defaults):
        if cp.has_section(name):
            out = dict(defaults)
            out.update({k: v for k, v in cp[name].items()})
            return out
        return dict(defaults)

    d = _DEFAULTS
    net = section("network", {k: d[k] for k in
                              ("n", "edges", "b_self", "tau_v", "x_d", "x_d_prime", "e_field",
                               "tau_p", "psi", "tau_c", "tau_delta", "xi",
                               "omega_base", "s_base_mva")})
    cost = section("cost", {"q": d["q"], "r": d["r"], "c": d["c"]})
    comm = section("comm", {"edges": d["comm_edges"]})
    try:
        params = _params_from_mapping(net, cost, comm)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid [network]/[cost]/[comm] section: {exc}") from exc

    wind = section("exo.wind", {k: d[k] for k in ("kappa0", "s0", "h", "wind_level",
                                                  "wind_deviation")})
    load = section("exo.load", {k: d[k] for k in ("load_omega", "load_mean",
                                                  "load_amp_scale", "load_phase")})
    exo = {
        "kappa0": _floats(wind["kappa0"]),
        "s0": _floats(wind["s0"]),
        "h": _floats(wind["h"]),
        "wind_level": _floats(wind["wind_level"]),
        "wind_deviation": float(wind["wind_deviation"]),
        "load_omega": float(load["load_omega"]),
        "load_mean": _floats(load["load_mean"]),
        "load_amp_scale": float(load["load_amp_scale"]),
        "load_phase": float(load["load_phase"]),
        "banks": _bank_settings(cp, params.n),
    }

    sim = {"horizon": 200.0, "integrator": "rk45", "step": 1e-3, "rtol": 1e-8,
           "atol": 1e-10, "noise_std": 1e-3, "seed": 0}
    if cp.has_section("sim"):
        for k, v in cp["sim"].items():
            if k in ("integrator",):
                sim[k] = v
            elif k in ("seed",):
                sim[k] = int(v)
            else:
                sim[k] = float(v)
    return params, exo, sim


def _parse_bank(sect):
    offset = float(sect["offset"])
    comps = []
    for tok in sect["components"].split(";"):
        tok = tok.strip()
        if not tok:
            continue
        a, w, p = (float(x) for x in tok.split(","))
        comps.append((a, w, p))
    return offset, comps


def _bank_settings(cp, n):
    loads = {}
    for area in range(1, n + 1):
        name = f"exo.bank.load{area}"
        if cp.has_section(name):
            loads[area] = _parse_bank(cp[name])
        elif area in BANK_LOADS:
            loads[area] = BANK_LOADS[area]
        else:
            raise ConfigError(f"missing section [{name}] for area {area}")
    wind = _parse_bank(cp["exo.bank.wind"]) if cp.has_section("exo.bank.wind") else BANK_WIND
    return {"loads": loads, "wind": wind}


def config_text():
    buf = io.StringIO()
    write_default_config(buf)
    return buf.getvalue()
