"""MDP primitives: state assembly, the IN indicator, reward, carbon.

The state for one step stacks, in declared order, (min, max, current)
for every selected parameter, the same triple for every selected SLO,
and finally the carbon footprint C. C is computed from the power SLO's
current value and the grid intensity at the current time and is never
itself a member of the reward's SLO set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from ..errors import StateUnavailableError, ValidationError

log = logging.getLogger("casca.mdp")

# Reward divides by C; a non-positive footprint is clamped here (and logged)
# rather than raised mid-run.
CARBON_FLOOR = 1e-6


def carbon_footprint(power_w: float, intensity_gco2eq_kwh: float) -> float:
    """mg CO2eq per minute. W for 60 s is W/60000 kWh; times g/kWh, times 1000 mg/g."""
    if power_w < 0:
        raise ValidationError(f"power must be non-negative, got {power_w}")
    if intensity_gco2eq_kwh < 0:
        raise ValidationError(f"intensity must be non-negative, got {intensity_gco2eq_kwh}")
    return power_w * intensity_gco2eq_kwh / 60.0


def in_fn(x: float, a: float, b: float, c: float) -> float:
    """1 when x lies in the closed interval [a, b], otherwise -2c."""
    if a > b:
        raise ValidationError(f"empty interval: a={a} > b={b}")
    return 1.0 if a <= x <= b else -2.0 * c


@dataclass(frozen=True)
class MdpState:
    """params: ((p_min, p_max, p), ...); slos: ((s_min, s_max, s), ...); carbon: C."""

    params: tuple
    slos: tuple
    carbon: float

    def vector(self) -> list[float]:
        out: list[float] = []
        for p_min, p_max, p in self.params:
            out.extend((float(p_min), float(p_max), float(p)))
        for s_min, s_max, s in self.slos:
            out.extend((float(s_min), float(s_max), float(s)))
        out.append(float(self.carbon))
        return out

    @property
    def dimension(self) -> int:
        return 3 * len(self.params) + 3 * len(self.slos) + 1

    @classmethod
    def from_vector(cls, vec, n_params: int, n_slos: int) -> "MdpState":
        vec = list(vec)
        if len(vec) != 3 * n_params + 3 * n_slos + 1:
            raise ValidationError(
                f"vector of length {len(vec)} does not fit {n_params} params + {n_slos} SLOs")
        params = tuple(tuple(vec[3 * i:3 * i + 3]) for i in range(n_params))
        off = 3 * n_params
        slos = tuple(tuple(vec[off + 3 * i:off + 3 * i + 3]) for i in range(n_slos))
        return cls(params=params, slos=slos, carbon=vec[-1])


def reward(state_next: MdpState) -> float:
    """Mean over the SLO set of IN(s, s_min, s_max, C) / C at the next state.

    A fulfilled SLO contributes 1/C, an unfulfilled one exactly -2. C at or
    below zero would be a singularity; it is clamped to a small floor.
    """
    if not state_next.slos:
        raise ValidationError("reward needs at least one SLO in the state")
    c = state_next.carbon
    if c <= 0:
        log.warning("carbon footprint %s clamped to %s for reward", c, CARBON_FLOOR)
        c = CARBON_FLOOR
    total = sum(in_fn(s, s_min, s_max, c) / c for s_min, s_max, s in state_next.slos)
    return total / len(state_next.slos)


class StateBuilder:
    """Assembles MdpStates from the three APIs for fixed id selections."""

    def __init__(self, slo_api, control_api, emma_api, param_ids, slo_ids,
                 power_slo_id: str, country: str, granularity: str):
        if not slo_ids:
            raise ValidationError("at least one SLO id is required")
        self.slo_api = slo_api
        self.control_api = control_api
        self.emma_api = emma_api
        self.param_ids = list(param_ids)
        self.slo_ids = list(slo_ids)
        self.power_slo_id = power_slo_id
        self.country = country
        self.granularity = granularity
        self.param_specs: dict[str, dict] = {}
        self.slo_specs: dict[str, dict] = {}

    def discover(self) -> None:
        for pid in self.param_ids:
            self.param_specs[pid] = self.control_api.get_setting(pid)
        for sid in self.slo_ids:
            self.slo_specs[sid] = self.slo_api.get_slo(sid)

    def intensity(self, now_ms: int) -> float:
        return self.emma_api.intensity(self.country, now_ms, self.granularity)

    def carbon(self, now_ms: int) -> float:
        power = self.slo_api.slo_value(self.power_slo_id)
        if power is None:
            raise StateUnavailableError(f"SLO {self.power_slo_id!r} has no value yet")
        return carbon_footprint(power["value"], self.intensity(now_ms))

    def build(self, now_ms: int) -> MdpState:
        params = []
        for pid in self.param_ids:
            spec = self.param_specs[pid]
            params.append((spec["min"], spec["max"], self.control_api.get_value(pid)))
        slos = []
        for sid in self.slo_ids:
            spec = self.slo_specs[sid]
            result = self.slo_api.slo_value(sid)
            if result is None:
                raise StateUnavailableError(f"SLO {sid!r} has no value yet")
            slos.append((spec["min"], spec["max"], result["value"]))
        return MdpState(params=tuple(params), slos=tuple(slos),
                        carbon=self.carbon(now_ms))
