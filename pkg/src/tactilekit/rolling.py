"""Quasi-static two-finger rolling simulator and the place/grasp/roll trial.

The thumb is a fixed rigid plane x = 0 facing +x.  The sensing finger is
the fingertip capsule turned to face -x and moving in the x-z plane; its
base sits at ``finger_pose[:3, 3]``.  The object rolls about the world y
axis.  Contact kinematics use the object's y = 0 cross-section: with no
slip at the finger the object pivots about its thumb contact, so its spin
follows from the finger velocity at the finger contact.  The finger sees
the full 3D indenter through the renderer and the calibrated
reconstruction, and only that sensed cloud reaches the controller.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .control import ControllerCommand, ControllerGains, TargetRegion, force_proxy, hybrid_step
from .geometry import FingertipSurface
from .objects import ObjectModel, make_object
from .optics import Renderer
from .reconstruction import Reconstructor
from .tracking import ContactTracker

log = logging.getLogger(__name__)

# sensor frame -> world rotation (finger turned half a turn about z)
FINGER_FLIP = np.diag([-1.0, -1.0, 1.0])
OUTCOMES = ("success", "fell_out", "overshoot", "timeout")


def rot_y(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def pose(rotation=None, translation=(0.0, 0.0, 0.0)) -> np.ndarray:
    T = np.eye(4)
    if rotation is not None:
        T[:3, :3] = rotation
    T[:3, 3] = translation
    return T


@dataclass
class SimState:
    finger_pose: np.ndarray
    thumb_pose: np.ndarray
    object_pose: np.ndarray
    time: float = 0.0
    object_angle: float = 0.0  # rad about world y
    lost: bool = False
    # running totals for the no-slip check
    rolled_angle: float = 0.0
    thumb_arc: float = 0.0

    def copy(self) -> "SimState":
        return replace(self, finger_pose=self.finger_pose.copy(), thumb_pose=self.thumb_pose.copy(),
                       object_pose=self.object_pose.copy())

    @property
    def finger_origin(self) -> np.ndarray:
        return self.finger_pose[:3, 3]

    @property
    def object_center(self) -> np.ndarray:
        return self.object_pose[:3, 3]


@dataclass
class SimConfig:
    dt: float = 0.025  # one reconstruction frame at 40 Hz
    timeout: float = 3.0
    approach_gap: float = 1.0  # mm between gel and object at placement
    approach_speed: float = 10.0
    creep_speed: float = 2.0
    travel_limit: float = 12.0  # mm of approach before giving up
    start_u: float = 0.22
    jitter: float = 1.0  # mm, uniform placement jitter along z
    max_indentation: float = 2.0  # finger yields beyond this (gel is 2.5 mm)
    contact_floor: float = 0.02  # mm of true indentation below which the grip is gone
    noise_sigma: float = 1.0
    supersample: int = 1
    downsample: int = 2
    region: TargetRegion = field(default_factory=TargetRegion)
    gains: ControllerGains = field(default_factory=ControllerGains)


@dataclass
class TrialResult:
    object: str
    outcome: str
    duration: float
    trace: list = field(default_factory=list)
    trial: int = 0
    grasp_proxy: float = float("nan")

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise ValueError(f"bad outcome {self.outcome!r}")


class RollingSim:
    """World geometry, contact kinematics and the sensing chain for one object."""

    def __init__(self, obj: ObjectModel | None, bundle=None, surface: FingertipSurface | None = None,
                 config: SimConfig | None = None, seed: int = 0, reconstructor=None, renderer=None):
        self.obj = obj
        self.config = config or SimConfig()
        self.surface = surface or (bundle.surface if bundle is not None else FingertipSurface())
        self.profile = obj.profile() if obj is not None else np.zeros((0, 2))
        self.rng = np.random.default_rng(seed)
        self.bundle = bundle
        self.reconstructor = reconstructor
        self.renderer = renderer
        if bundle is not None and reconstructor is None:
            self.reconstructor = Reconstructor(bundle, downsample=self.config.downsample)
        if self.reconstructor is not None and renderer is None:
            cam = self.reconstructor.bundle.camera
            self.renderer = Renderer(self.surface, cam, supersample=self.config.supersample)
        self.sequence = 0

    # ------------------------------------------------------------ geometry
    def boundary(self, state: SimState) -> np.ndarray:
        """Object cross-section boundary in world (x, z)."""
        if self.obj is None:
            return self.profile
        c, s = math.cos(state.object_angle), math.sin(state.object_angle)
        px, pz = self.profile[:, 0], self.profile[:, 1]
        x = c * px + s * pz + state.object_center[0]
        z = -s * px + c * pz + state.object_center[2]
        return np.stack([x, z], axis=1)

    def _finger_axis(self, state: SimState, points):
        """Closest point on the finger axis segment for world (x, z) points."""
        o = state.finger_origin
        lo, hi = o[2] - 4 * self.surface.radius, o[2] + self.surface.length
        z = np.clip(points[:, 1], lo, hi)
        return np.stack([np.full(len(points), o[0]), z], axis=1)

    def finger_contact(self, state: SimState):
        """(indentation, contact point, outward finger normal) in world x-z."""
        b = self.boundary(state)
        if len(b) == 0:
            return 0.0, None, None
        a = self._finger_axis(state, b)
        off = b - a
        dist = np.linalg.norm(off, axis=1)
        pen = self.surface.radius - dist
        k = int(np.argmax(pen))
        if pen[k] <= 0:
            return float(pen[k]), None, None
        n = off[k] / dist[k]
        return float(pen[k]), b[k], n

    def thumb_contact(self, state: SimState, tol: float = 1e-6) -> np.ndarray:
        """Object point touching the thumb plane, refined between profile samples.

        Flat faces give the middle of the touching run; curved contacts use
        a parabolic fit of x over the neighbouring samples.
        """
        b = self.boundary(state)
        k = int(np.argmin(b[:, 0]))
        near = b[:, 0] <= b[k, 0] + tol
        if near.sum() > 3:
            return b[near].mean(axis=0)
        n = len(b)
        p0, p1, p2 = b[(k - 1) % n], b[k], b[(k + 1) % n]
        den = p0[0] - 2 * p1[0] + p2[0]
        s = 0.5 * (p0[0] - p2[0]) / den if den > 1e-15 else 0.0
        s = float(np.clip(s, -0.5, 0.5))
        # quadratic through the three samples, evaluated at offset s
        return p1 + 0.5 * s * (p2 - p0) + 0.5 * s * s * (p0 - 2 * p1 + p2)

    def true_contact(self, state: SimState) -> np.ndarray:
        """Deepest finger contact point in the sensor frame (NaN without contact)."""
        _, pc, _ = self.finger_contact(state)
        if pc is None:
            return np.full(3, np.nan)
        return state.finger_pose[:3, :3].T @ (np.array([pc[0], 0.0, pc[1]]) - state.finger_origin)

    def indentation(self, state: SimState) -> float:
        return max(self.finger_contact(state)[0], 0.0)

    def _seat(self, state: SimState):
        """Slide the object along x so it just touches the thumb plane."""
        if self.obj is None:
            return
        xm = self.boundary(state)[:, 0].min()
        state.object_pose[0, 3] -= xm - state.thumb_pose[0, 3]

    # ------------------------------------------------------------ placement
    def place(self, start_u: float | None = None) -> SimState:
        cfg = self.config
        u0 = cfg.start_u if start_u is None else start_u
        s0 = u0 * self.surface.sensed_arc_length
        jitter = self.rng.uniform(-cfg.jitter, cfg.jitter)
        state = SimState(pose(FINGER_FLIP, (0.0, 0.0, 0.0)), pose(), pose())
        if self.obj is None:
            state.finger_pose[0, 3] = self.surface.radius + cfg.approach_gap + 40.0
            return state
        state.object_pose[:3, 3] = (0.0, 0.0, s0 + jitter)
        self._seat(state)
        width = self.boundary(state)[:, 0].max()
        state.finger_pose[0, 3] = width + cfg.approach_gap + self.surface.radius
        return state

    # ------------------------------------------------------------ kinematics
    def finger_velocity_world(self, command) -> np.ndarray:
        v = command.velocity if isinstance(command, ControllerCommand) else np.asarray(command, float)
        return FINGER_FLIP @ v

    def step_quasistatic(self, state: SimState, command, dt: float) -> SimState:
        """Advance the finger by ``command * dt`` and roll the object without slip."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        v = self.finger_velocity_world(command)
        new = state.copy()
        new.time = state.time + dt
        if not np.any(v):
            return new
        move = v * dt
        pen0, pc, n = self.finger_contact(state)
        new.finger_pose[0, 3] += move[0]
        new.finger_pose[2, 3] += move[2]
        if self.obj is None:
            return new
        if pc is not None:
            # spin about the thumb contact that makes the contact point follow the finger tangentially
            ct = self.thumb_contact(state)
            t = np.array([-n[1], n[0]])
            r = pc - ct
            lever = t @ np.array([r[1], -r[0]])
            if abs(lever) > 1e-9:
                dtheta = float(t @ move[[0, 2]]) / lever
                c = state.object_center[[0, 2]] - ct
                cs, sn = math.cos(dtheta), math.sin(dtheta)
                c2 = ct + np.array([cs * c[0] + sn * c[1], -sn * c[0] + cs * c[1]])
                new.object_pose[0, 3], new.object_pose[2, 3] = c2
                new.object_angle = state.object_angle + dtheta
                new.object_pose[:3, :3] = rot_y(new.object_angle)
                self._seat(new)
                new.rolled_angle = state.rolled_angle + abs(dtheta)
                new.thumb_arc = state.thumb_arc + float(np.linalg.norm(self.thumb_contact(new) - ct))
        pen, _, n2 = self.finger_contact(new)
        if pen > self.config.max_indentation and n2 is not None:
            # finger compliance: the joint yields rather than crushing the gel
            back = (pen - self.config.max_indentation) * n2
            new.finger_pose[0, 3] -= back[0]
            new.finger_pose[2, 3] -= back[1]
            pen = self.config.max_indentation
        if pen0 > self.config.contact_floor and pen <= self.config.contact_floor:
            new.lost = True
        return new

    # ------------------------------------------------------------ sensing
    def sensor_sdf(self, state: SimState):
        """Object SDF expressed in the finger's sensor frame, and its centre there."""
        return _SensorSDF(self.obj, state.finger_pose, state.object_pose), \
            state.finger_pose[:3, :3].T @ (state.object_center - state.finger_origin)

    def contact_bound(self, state: SimState):
        """Sensor-frame sphere enclosing everything the object can deform."""
        b = self.boundary(state)
        pen = self.surface.radius - np.linalg.norm(b - self._finger_axis(state, b), axis=1)
        hit = pen > 0
        if not hit.any():
            return state.finger_pose[:3, :3].T @ (state.object_center - state.finger_origin), 0.0
        k = int(np.argmax(pen))
        extent = float(np.max(np.linalg.norm(b[hit] - b[k], axis=1)))
        lateral = math.sqrt(2.0 * self.surface.radius * pen[k])
        pc = np.array([b[k, 0], 0.0, b[k, 1]])
        centre = state.finger_pose[:3, :3].T @ (pc - state.finger_origin)
        return centre, extent + lateral + 1.0

    def render(self, state: SimState):
        if self.renderer is None:
            raise RuntimeError("simulator has no sensing chain (no bundle)")
        self.sequence += 1
        if self.obj is None or self.indentation(state) <= 0:
            st = None
        else:
            sdf, _ = self.sensor_sdf(state)
            center, radius = self.contact_bound(state)
            st = self.renderer.sdf_state(sdf, center, radius)
        return self.renderer.render(st, sequence=self.sequence, noise_sigma=self.config.noise_sigma,
                                    rng=self.rng, timestamp=int(state.time * 1e9))

    def sense(self, state: SimState):
        return self.reconstructor(self.render(state))


class _SensorSDF:
    def __init__(self, obj, finger_pose, object_pose):
        self.obj = obj
        self.Rw, self.pf = finger_pose[:3, :3], finger_pose[:3, 3]
        self.Ro, self.co = object_pose[:3, :3], object_pose[:3, 3]
        self.back = self.Rw.T @ self.Ro

    def _local(self, p):
        return (p @ self.Rw.T + self.pf - self.co) @ self.Ro

    def distance(self, p):
        return self.obj.distance(self._local(p))

    def __call__(self, p):
        d, g = self.obj.sdf(self._local(p))
        return d, g @ self.back.T


# ---------------------------------------------------------------- stages

def grasp_stage(sim: RollingSim, state: SimState, setpoint: float | None = None,
                tracker: ContactTracker | None = None):
    """Close the finger until the sensed proxy reaches ``setpoint``.

    Returns (state, proxy, grasped).  Running out of travel means the
    object was never gripped.
    """
    cfg = sim.config
    setpoint = cfg.gains.setpoint if setpoint is None else setpoint
    tracker = tracker or ContactTracker()
    travel = 0.0
    approach = np.array([1.0, 0.0, 0.0])  # sensor +x is the gel face
    proxy = 0.0
    while travel <= cfg.travel_limit:
        cloud = sim.sense(state)
        patch, _ = tracker.track_step(cloud, state.time)
        proxy = force_proxy(cloud)
        if patch is not None and proxy >= setpoint:
            return state, proxy, True
        speed = cfg.approach_speed if patch is None else cfg.creep_speed
        step = speed * cfg.dt
        state = sim.step_quasistatic(state, approach * speed, cfg.dt)
        travel += step
    return state, proxy, False


def run_trial(sim: RollingSim, region: TargetRegion | None = None, config: SimConfig | None = None,
              trial: int = 0) -> TrialResult:
    """Place, grasp, then roll until the tracked contact reaches ``region``."""
    if config is not None:
        sim.config = config
    cfg = sim.config
    region = region or cfg.region
    name = sim.obj.name if sim.obj is not None else "none"
    tracker = ContactTracker()
    state = sim.place()
    state, proxy, ok = grasp_stage(sim, state, cfg.gains.setpoint, tracker)
    if not ok:
        return TrialResult(name, "fell_out", 0.0, [], trial, proxy)
    grasp_proxy = proxy
    t0 = state.time
    trace = []
    start_u = None
    while True:
        elapsed = state.time - t0
        cloud = sim.sense(state)
        prev = tracker.patch
        patch, motion = tracker.track_step(cloud, elapsed)
        proxy = force_proxy(cloud)
        uv = patch.centroid_uv if patch is not None else np.array([np.nan, np.nan])
        # where the tracked motion carries the previous contact centroid
        step = motion.apply(prev.centroid) - prev.centroid if prev is not None else np.zeros(3)
        trace.append({"t": elapsed, "u": float(uv[0]), "v": float(uv[1]), "proxy": proxy,
                      "indentation": sim.indentation(state),
                      "finger_z": float(state.finger_origin[2]),
                      "object_angle": state.object_angle,
                      "step_translation": motion.translation.tolist(),
                      "contact_step": step.tolist(),
                      "centroid": (patch.centroid if patch is not None else np.full(3, np.nan)).tolist(),
                      "true_contact": sim.true_contact(state).tolist(),
                      "confident": bool(motion.confident)})
        if state.lost or (patch is None and sim.indentation(state) <= cfg.contact_floor):
            return TrialResult(name, "fell_out", elapsed, trace, trial, grasp_proxy)
        if patch is not None:
            if region.contains(uv):
                return TrialResult(name, "success", elapsed, trace, trial, grasp_proxy)
            if start_u is None:
                start_u = float(uv[0])
            # overshoot means crossing the far boundary, not starting past it
            if region.beyond(uv) and start_u <= region.u_max:
                return TrialResult(name, "overshoot", elapsed, trace, trial, grasp_proxy)
        if elapsed >= cfg.timeout:
            return TrialResult(name, "timeout", elapsed, trace, trial, grasp_proxy)
        cmd = hybrid_step(patch, region, proxy, cfg.gains, sim.surface)
        state = sim.step_quasistatic(state, cmd, cfg.dt)


def run_experiment(objects, trials_per_object: int = 10, bundle=None, seed: int = 7,
                   config: SimConfig | None = None, progress=None):
    """Seeded trials over several objects; returns (results, summary)."""
    if isinstance(objects, (str, ObjectModel)):
        objects = [objects]
    if not objects:
        raise ValueError("need at least one object")
    if trials_per_object < 1:
        raise ValueError("trials_per_object must be positive")
    cfg = config or SimConfig()
    recon = Reconstructor(bundle, downsample=cfg.downsample) if bundle is not None else None
    renderer = None
    results = []
    for k, obj in enumerate(objects):
        obj = make_object(obj) if isinstance(obj, str) else obj
        for i in range(trials_per_object):
            ss = np.random.SeedSequence([seed, k, i])
            sim = RollingSim(obj, bundle, config=cfg, seed=int(ss.generate_state(1)[0]),
                             reconstructor=recon, renderer=renderer)
            renderer = sim.renderer
            t = time.perf_counter()
            res = run_trial(sim, trial=i)
            log.info("%s trial %d: %s after %.2f s (%.1f s wall)", obj.name, i, res.outcome,
                     res.duration, time.perf_counter() - t)
            results.append(res)
            if progress is not None:
                progress(res)
    return results, summarize(results)


def summarize(results) -> dict:
    out = {}
    for r in results:
        d = out.setdefault(r.object, {o: 0 for o in OUTCOMES} | {"trials": 0})
        d[r.outcome] += 1
        d["trials"] += 1
    total = sum(d["trials"] for d in out.values())
    ok = sum(d["success"] for d in out.values())
    return {"objects": out, "trials": total, "successes": ok}
