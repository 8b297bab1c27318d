"""
End-to-end teleoperation: SoftHand -> link -> mapping -> cascade -> belt plant.

The belt device is the link master. Every tick it polls the hand for
(p_SHmeas, rc_SHmeas), maps the latest measurement to slide and squeeze
references and advances the device by one control period.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .control import CascadeGains, ControlMode, Device, pretension
from .mapping import POSITION_MAPS, FORCE_MAPS, MappingConfig
from .plant import ArmLoadModel, Plant, PlantConfig, decompose
from .softhand import GraspObject, SoftHandConfig, SoftHandSim
from .wire import DuplexChannel, LinkStats, Master, Slave, run_link

__all__ = ["TeleopResult", "TRACE_COLUMNS", "run_teleop"]

TRACE_COLUMNS = (
    "tick", "t_s", "closure_cmd", "fresh", "p_SHmeas", "rc_SHmeas", "slide_ref", "squeeze_ref",
    "p_left", "p_right", "i_left_mA", "i_right_mA", "net_tighten", "net_slide", "force_N",
)


@dataclass
class TeleopResult:
    trace: np.ndarray  # one row per tick, columns TRACE_COLUMNS
    stats: LinkStats

    def column(self, name: str) -> np.ndarray:
        return self.trace[:, TRACE_COLUMNS.index(name)]

    def __len__(self) -> int:
        return len(self.trace)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for row in self.trace:
                w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:3]] + [int(row[3])]
                           + [repr(float(v)) for v in row[4:]])


def run_teleop(mapping_cfg: MappingConfig, obj: GraspObject | None = None, *, mode: str = "lockstep",
               duration: float = 1.0, period: float = 0.001, closure_cmd: float = 18000.0,
               position_map: str = "linear", force_map: str = "linear", seed: int | None = 0,
               plant_cfg: PlantConfig | None = None, load: ArmLoadModel | None = None,
               gains: CascadeGains | None = None, softhand_cfg: SoftHandConfig | None = None,
               corrupt_prob: float = 0.0, timeout_ticks: int = 10,
               do_pretension: bool = True) -> TeleopResult:
    """Run the full pipeline; raises ``LinkTimeout`` if the hand goes silent.

    Squeeze references are net tighten ticks past the pre-tensioned zero,
    slide references are net slide ticks. A stale tick reuses the last
    measurement. The squeeze is held at zero for ``mapping_cfg.dwell``
    seconds after the start.
    """
    if position_map not in POSITION_MAPS:
        raise ValueError(f"position_map must be one of {tuple(POSITION_MAPS)}")
    if force_map not in FORCE_MAPS:
        raise ValueError(f"force_map must be one of {tuple(FORCE_MAPS)}")
    plant_cfg = plant_cfg or PlantConfig()
    if not math.isclose(period, plant_cfg.dt):
        raise ValueError(f"link period {period} s must equal the plant step {plant_cfg.dt} s")
    obj = obj or GraspObject.empty()
    ss = np.random.SeedSequence(seed)
    hand_ss, link_ss = ss.spawn(2)

    device = Device(Plant(plant_cfg, load or ArmLoadModel()), gains, ControlMode.POSITION_CURRENT)
    if do_pretension:
        pretension(device)
    channel = DuplexChannel(corrupt_prob, np.random.default_rng(link_ss))
    hand = SoftHandSim(obj, softhand_cfg, np.random.default_rng(hand_ss))
    master = Master(channel.a, timeout_ticks=timeout_ticks)
    slave = Slave(channel.b, hand)

    n = int(round(duration / period))
    rows = np.zeros((n, len(TRACE_COLUMNS)))
    pmap, fmap = POSITION_MAPS[position_map], FORCE_MAPS[force_map]
    zl, zr = device.zero

    def on_tick(k, meas, fresh):
        p, rc = meas if meas is not None else (0, 0)
        slide = float(pmap(p, mapping_cfg)) if meas is not None else 0.0
        squeeze = float(fmap(rc, mapping_cfg)) if meas is not None else 0.0
        if (k + 1) * period <= mapping_cfg.dwell:
            squeeze = 0.0
        tr = device.run(squeeze, slide, log_every=1)
        pl, pr = device.plant.left.position, device.plant.right.position
        nt, ns = decompose(pl - zl, pr - zr)
        rows[k] = (k, (k + 1) * period, closure_cmd, fresh, p, rc, slide, squeeze, pl, pr,
                   tr.i_left[-1], tr.i_right[-1], nt, ns, tr.force[-1])

    stats = run_link(master, slave, mode, duration, period, lambda k: closure_cmd, on_tick)
    stats.frames_corrupted = channel.corrupted
    return TeleopResult(rows, stats)
