"""Generate the bundled scenario-3 injection profiles.

The files mimic one day of per-area net uncontrolled injections: the
sinusoid-bank signals the controller's exosystems reproduce, plus extra
harmonics the exosystems do NOT model (the mismatch the scenario exercises).
Times are in data seconds (one day); the simulator's time-compression maps
them onto the simulation horizon.  Power is stored in MW on the 1000 MVA
base to exercise the unit conversion.
"""

import os

import numpy as np

from orlfc.config import BANK_LOADS, BANK_WIND, default_network_params

COMPRESSION = 144.0  # one data day -> 600 s of simulation time
S_BASE = 1000.0

# unmodeled extras per area: (amplitude p.u., angular frequency rad/s in
# compressed time, phase) -- a slow component plus a faster ripple.  Sized so
# the closed loop's frequency ripple from the model mismatch stays inside the
# documented 5e-3 rad/s band.
EXTRAS = {
    1: [(0.0375, 0.023, 1.00), (0.015, 0.171, 0.40)],
    2: [(0.0063, 0.029, 2.10), (0.0025, 0.146, 1.30)],
    3: [(0.0075, 0.019, 0.70), (0.0025, 0.158, 2.60)],
    4: [(0.0063, 0.026, 2.90), (0.0025, 0.188, 0.90)],
}


def bank_injection(area, tau):
    off_w, comps_w = BANK_WIND
    off_l, comps_l = BANK_LOADS[area]
    p = np.full_like(tau, off_w - off_l)
    for a, w, ph in comps_w:
        p += a * np.sin(w * tau + ph)
    for a, w, ph in comps_l:
        p -= a * np.sin(w * tau + ph)
    return p


def main(out_dir):
    params = default_network_params()
    os.makedirs(out_dir, exist_ok=True)
    t_data = np.arange(0.0, 86400.0 + 1.0, 60.0)  # 1-minute sampling
    tau = t_data / COMPRESSION
    for area in range(1, params.n + 1):
        p = bank_injection(area, tau)
        for a, w, ph in EXTRAS[area]:
            p += a * np.sin(w * tau + ph)
        path = os.path.join(out_dir, f"area{area}.csv")
        with open(path, "w") as fh:
            fh.write("t,P_MW\n")
            for tv, pv in zip(t_data, p * S_BASE):
                fh.write(f"{tv:.17g},{pv:.17g}\n")
        print(f"wrote {path}")


if __name__ == "__main__":
    here = os.path.dirname(os.path.abspath(__file__))
    main(os.path.join(here, "..", "data", "scenario3"))
