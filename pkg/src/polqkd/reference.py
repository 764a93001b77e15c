"""Published measurement records used as regression targets.

``POVM_REFERENCE`` is the measured-probability table of the decoder at its
ideal settings.  ``FIELD_RUNS`` holds the four fiber-spool runs: source
parameters, total channel loss, the raw sifted tallies after ``1e10``
pulses and the derived finite-key quantities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .link import ChannelConfig, DetectorConfig, SourceConfig, TallyBlock

# rows: sent state H, V, D, A; columns: ports H, V, D, A
POVM_REFERENCE = np.array(
    [
        [0.5, 0.0, 0.25, 0.25],
        [0.0, 0.5, 0.25, 0.25],
        [0.25, 0.25, 0.5, 0.0],
        [0.25, 0.25, 0.0, 0.5],
    ]
)

FIELD_PULSES = 1e10
FIELD_REP_RATE = 50e6

# Dark counts only land in a ~3 ns detection gate; with the full 20 ns slot
# the modeled error floor is far above the measured long-distance QBERs.
FIELD_GATE_WINDOW = 3e-9


@dataclass(frozen=True)
class FieldRun:
    distance_km: float
    loss_db: float
    mu: float
    nu: float
    p_mu: float
    p_nu: float
    p_z: float
    p_x: float
    n: tuple[tuple[float, float], tuple[float, float]]  # [basis Z/X][intensity mu/nu]
    m: tuple[tuple[float, float], tuple[float, float]]
    phi_z_u: float
    qber: float
    s_z1_l: float
    skr: float

    def source(self) -> SourceConfig:
        return SourceConfig(
            rep_rate=FIELD_REP_RATE,
            mu=self.mu,
            nu=self.nu,
            p_mu=self.p_mu,
            p_nu=self.p_nu,
            p_z=self.p_z,
            p_x=self.p_x,
        )

    def channel(self) -> ChannelConfig:
        return ChannelConfig(length_km=self.distance_km, atten_db_per_km=self.loss_db / self.distance_km)

    def detector(self) -> DetectorConfig:
        return DetectorConfig(gate_window=FIELD_GATE_WINDOW)

    def tally(self) -> TallyBlock:
        return TallyBlock(FIELD_PULSES / FIELD_REP_RATE, np.array(self.n), np.array(self.m))


FIELD_RUNS: dict[int, FieldRun] = {
    25: FieldRun(
        25, 4.97, 0.679, 0.127, 0.859, 0.141, 0.960, 0.040,
        ((3.08e7, 9.57e5), (1.09e6, 2.91e4)),
        ((1.59e5, 8.04e3), (8.14e3, 8.84e2)),
        3.37e-2, 5.27e-3, 1.48e7, 4.94e4,
    ),
    50: FieldRun(
        50, 9.73, 0.654, 0.151, 0.809, 0.191, 0.943, 0.057,
        ((8.56e6, 4.75e5), (5.03e5, 2.69e4)),
        ((4.70e4, 4.48e3), (4.91e3, 8.95e2)),
        3.36e-2, 5.70e-3, 4.26e6, 1.41e4,
    ),
    75: FieldRun(
        75, 14.22, 0.626, 0.176, 0.726, 0.274, 0.907, 0.093,
        ((2.23e6, 2.31e5), (2.22e5, 2.61e4)),
        ((1.90e4, 4.73e3), (3.00e3, 1.03e3)),
        3.25e-2, 9.66e-3, 1.08e6, 3.15e3,
    ),
    100: FieldRun(
        100, 18.68, 0.569, 0.185, 0.598, 0.402, 0.761, 0.239,
        ((4.53e5, 1.05e5), (1.43e5, 3.53e4)),
        ((9.90e3, 4.68e3), (4.84e3, 2.92e3)),
        7.62e-2, 2.61e-2, 2.64e5, 2.40e2,
    ),
}

# Reported average QBER of the unattended stability run and the recovered
# QBER after scrambling with feedback on.
STABILITY_QBER = 0.0056
RECOVERED_QBER = 0.0139


def nearest_run(distance_km: float) -> FieldRun:
    return FIELD_RUNS[min(FIELD_RUNS, key=lambda d: (abs(d - distance_km), d))]
