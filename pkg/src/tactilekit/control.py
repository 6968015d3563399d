"""Hybrid velocity/force controller for in-hand rolling.

Commands are finger velocities in the sensor frame.  The tangential part
drives the contact across the fingertip toward a target region; the normal
part regulates the maximum gel displacement (the force proxy).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import FingertipSurface


@dataclass(frozen=True)
class ControllerGains:
    setpoint: float = 0.8  # mm of peak displacement
    k_f: float = 2.0  # 1/s
    speed: float = 10.0  # mm/s, tangential
    max_normal_speed: float = 5.0  # mm/s
    lateral_gain: float = 0.5  # steering toward the region centre in v
    forward_only: bool = True

    def __post_init__(self):
        if self.setpoint < 0 or self.k_f < 0 or self.speed < 0 or self.max_normal_speed <= 0:
            raise ValueError("controller gains must be non-negative")


@dataclass(frozen=True)
class TargetRegion:
    """Axis-aligned rectangle in fingertip (u, v)."""
    u_min: float = 0.50
    u_max: float = 0.65
    v_min: float = 0.30
    v_max: float = 0.70

    def __post_init__(self):
        if not (self.u_min < self.u_max and self.v_min < self.v_max):
            raise ValueError("empty target region")

    @property
    def center(self) -> np.ndarray:
        return np.array([0.5 * (self.u_min + self.u_max), 0.5 * (self.v_min + self.v_max)])

    def contains(self, uv) -> bool:
        u, v = uv
        return bool(self.u_min <= u <= self.u_max and self.v_min <= v <= self.v_max)

    def beyond(self, uv) -> bool:
        """Past the far (high u) boundary."""
        return bool(uv[0] > self.u_max)


@dataclass
class ControllerCommand:
    tangential_velocity: np.ndarray  # mm/s, sensor frame
    normal_correction: float  # mm/s along ``normal``, positive toward the object
    normal: np.ndarray
    lost_contact: bool = False

    @classmethod
    def zero(cls, lost_contact: bool = False) -> "ControllerCommand":
        return cls(np.zeros(3), 0.0, np.zeros(3), lost_contact)

    @property
    def normal_velocity(self) -> np.ndarray:
        return self.normal_correction * self.normal

    @property
    def velocity(self) -> np.ndarray:
        return self.tangential_velocity + self.normal_velocity

    @property
    def is_zero(self) -> bool:
        return not np.any(self.velocity)


def force_proxy(cloud) -> float:
    """Peak gel displacement of a reconstructed cloud (mm)."""
    d = np.asarray(getattr(cloud, "displacement", cloud), dtype=float)
    return float(max(d.max(), 0.0)) if d.size else 0.0


def normal_command(proxy: float, gains: ControllerGains) -> float:
    c = gains.k_f * (gains.setpoint - proxy)
    return float(np.clip(c, -gains.max_normal_speed, gains.max_normal_speed))


def contact_frame(surface: FingertipSurface, uv):
    """Tangent along u, tangent along v and outward normal at a contact."""
    u = float(np.clip(uv[0], 0.0, 1.0))
    v = float(np.clip(uv[1], 0.0, 1.0))
    t_u, t_v, n = surface.frame(u, v)
    return np.asarray(t_u), np.asarray(t_v), np.asarray(n)


def hybrid_step(patch, region: TargetRegion, proxy: float, gains: ControllerGains = ControllerGains(),
                surface: FingertipSurface | None = None, setpoint: float | None = None) -> ControllerCommand:
    """One control update from the current contact patch.

    The contact should travel toward ``region`` over the fingertip; with
    no slip the finger has to move the opposite way, so the tangential
    velocity points against the desired contact travel.  With
    ``forward_only`` a contact already past the region is held in place
    rather than rolled back.  The normal correction ``k_f (setpoint -
    proxy)`` pushes along the outward normal (toward the object) while the
    proxy is below the setpoint.
    """
    if patch is None or len(patch) == 0:
        return ControllerCommand.zero(lost_contact=True)
    if setpoint is not None:
        gains = ControllerGains(**{**gains.__dict__, "setpoint": setpoint})
    surface = surface or FingertipSurface()
    uv = patch.centroid_uv
    t_u, t_v, n = contact_frame(surface, uv)

    goal = region.center
    du = (goal[0] - uv[0]) * surface.sensed_arc_length
    dv = (goal[1] - uv[1]) * surface.sector_rad * surface.radius
    if gains.forward_only:
        if region.beyond(uv):
            # region is behind and reversing is not allowed: hold, keep the grip
            return ControllerCommand(np.zeros(3), normal_command(proxy, gains), n, False)
        du = max(du, 0.0)
        along = 1.0
    else:
        along = 1.0 if du > 0 else -1.0
    lateral = float(np.clip(gains.lateral_gain * dv / max(abs(du), 1.0), -1.0, 1.0))
    d = along * t_u + lateral * t_v
    d = d - (d @ n) * n
    d /= np.linalg.norm(d)
    tangential = -gains.speed * d
    # remove any residue so the split is exact
    tangential = tangential - (tangential @ n) * n
    return ControllerCommand(tangential, normal_command(proxy, gains), n, False)
