"""Shared reference implementations used by more than one test module."""

import math

import numpy as np

from flowvel.depth import tv_objective
from flowvel.frontend import FlowField
from flowvel.geometry import CameraIntrinsics, build_angle_grid


def row_problem():
    """64-px row with an offset, noise and a bump across the epipole.

    Fixed seed; used both for the solver unit tests and as the reference
    problem the acceptance suite compares against an independent solver.
    """
    intr = CameraIntrinsics(width_px=64, height_px=2, hfov_rad=math.radians(60),
                            vfov_rad=math.radians(2))
    grid = build_angle_grid(intr)
    rng = np.random.default_rng(42)
    u = -(1.0 / np.linspace(3.0, 9.0, 64))[None, :] * grid.cs_h
    y = (u + 0.004 + 0.001 * rng.normal(size=u.shape)
         + 0.02 * np.exp(-(grid.alpha_h / math.radians(2.0)) ** 2))
    return FlowField(u=y, w=np.zeros_like(y), t=0.0), grid


def subgradient_reference(y, cs, gamma, rounds=40, steps_per_round=1000):
    """Independent solver for the flow-repair objective on one plane.

    Plain joint subgradient descent over (ratio profile, offset) with
    target-level step control: the step aims slightly below the best value
    seen so far, and the aim distance halves whenever a round stalls. No
    proximal machinery, so it shares nothing with the library's solver
    beyond the objective definition. Returns the best objective found.
    """
    s = np.divide(y, cs, out=np.zeros_like(y), where=np.abs(cs) > 1e-3)
    beta = float(np.mean(s * cs - y))

    def objective(s, beta):
        return tv_objective(y, s * cs - beta, beta, cs, gamma)

    best = objective(s, beta)
    delta = 0.5 * best
    for _ in range(rounds):
        round_start = best
        for _ in range(steps_per_round):
            resid = s * cs - y - beta
            gs = 2.0 * cs * resid
            sg = np.sign(np.diff(s, axis=1))
            gs[:, :-1] -= gamma * sg
            gs[:, 1:] += gamma * sg
            gb = -2.0 * float(resid.sum())
            f = objective(s, beta)
            if f < best:
                best = f
            gnorm2 = float(np.sum(gs * gs)) + gb * gb
            if gnorm2 == 0.0:
                return best
            step = (f - (best - delta)) / gnorm2
            s = s - step * gs
            beta = beta - step * gb
        if round_start - best < delta / 2:
            delta /= 2.0
        if delta < 1e-7 * best:
            break
    return best
