"""Euler-Maruyama simulation of controlled interacting particles with common
noise.

Each particle follows

    X_{k+1}^i = X_k^i + b(t_k, X_k^i, mu_k, a_k^i) dt
              + sigma(t_k, X_k^i, a_k^i) dW_k^i
              + sigma0(t_k) dW_k^0
              + eps dB_k^i,

where mu_k is the empirical measure of all n particles at step k: within one
realization of the shared path W^0 the cloud itself represents the
conditional law of the state given W^0.

Noise is drawn from counter-based (Philox) streams keyed by
(seed, channel, path, step).  Within a step's block, row i belongs to noise
identity i, so pairing two simulations on the same identities produces a
pathwise coupling, and permuting initial points together with their noise
identities permutes trajectories without changing any of them.  The common
channel is keyed by the main seed only, so runs that differ in their
idiosyncratic seed still share the identical W^0 path bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from mfhjb.measures import ParticleEnsemble, translate

__all__ = [
    "SimConfig",
    "PathBundle",
    "noise_block",
    "simulate",
    "moment_checks",
    "ito_expectation_check",
    "dump_trajectories",
]

_COMMON, _IDIO, _PERTURB = 0, 1, 2


@dataclass(frozen=True)
class SimConfig:
    """Grid, horizon, perturbation size and seeds for one particle system.

    ``noise_seed`` keys the idiosyncratic and perturbation channels and
    defaults to ``seed``; the common channel is always keyed by ``seed``.
    """

    n: int
    steps: int
    t0: float
    t1: float
    seed: int
    epsilon: float = 0.0
    noise_seed: int | None = None

    def __post_init__(self):
        if self.n < 1 or self.steps < 1:
            raise ValueError("need n >= 1 and steps >= 1")
        if not (self.t0 < self.t1):
            raise ValueError("need t0 < t1")
        if self.epsilon < 0.0:
            raise ValueError("epsilon must be >= 0")

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.steps

    @property
    def idio_seed(self) -> int:
        return self.seed if self.noise_seed is None else self.noise_seed

    def replace(self, **kw) -> "SimConfig":
        from dataclasses import replace

        return replace(self, **kw)


@dataclass(frozen=True)
class PathBundle:
    """One realization: the shared increments, all trajectories, controls."""

    times: np.ndarray  # (steps + 1,)
    common_increments: np.ndarray  # (steps, d)
    trajectories: np.ndarray  # (steps + 1, n, d)
    controls_used: np.ndarray  # (steps, n, q)

    @property
    def terminal(self) -> ParticleEnsemble:
        return ParticleEnsemble(self.trajectories[-1])

    def ensemble_at(self, k: int) -> ParticleEnsemble:
        return ParticleEnsemble(self.trajectories[k])


def noise_block(seed: int, channel: int, path: int, step: int, rows: int, d: int) -> np.ndarray:
    """Standard normal block for one (channel, path, step); row i is the draw
    for noise identity i.  Fully determined by the key, independent of how
    many rows are requested (leading rows coincide across calls)."""
    bitgen = np.random.Philox(
        counter=np.array([0, 0, path, step], dtype=np.uint64),
        key=np.array([seed % 2**64, channel], dtype=np.uint64),
    )
    return np.random.Generator(bitgen).standard_normal((rows, d))


def _diffuse(sig: np.ndarray, dw: np.ndarray) -> np.ndarray:
    # sig (d, d) shared, or (n, d, d) per particle
    if sig.ndim == 2:
        return dw @ sig.T
    return np.einsum("nij,nj->ni", sig, dw)


def simulate(
    coeffs,
    init: ParticleEnsemble,
    policy,
    cfg: SimConfig,
    path_index: int = 0,
    noise_ids: np.ndarray | None = None,
) -> PathBundle:
    """Run the Euler-Maruyama scheme for one common-noise realization.

    ``coeffs`` provides drift/diffusion/common_diffusion in vectorized form
    (see control.CoefficientSet); ``policy.actions_at(t, X)`` supplies the
    per-particle actions.  Any non-finite state aborts with the step index.
    """
    n, d = init.n, init.d
    dt = cfg.dt
    sq = math.sqrt(dt)
    ids = np.arange(n) if noise_ids is None else np.asarray(noise_ids, dtype=int)
    if ids.shape != (n,):
        raise ValueError("noise_ids must have one entry per particle")
    rows = int(ids.max()) + 1

    times = cfg.t0 + dt * np.arange(cfg.steps + 1)
    traj = np.empty((cfg.steps + 1, n, d))
    traj[0] = init.points
    common = np.empty((cfg.steps, d))
    controls = None

    x = init.points.copy()
    for k in range(cfg.steps):
        t = float(times[k])
        ens = ParticleEnsemble(x)
        a = np.atleast_2d(policy.actions_at(t, x))
        if a.shape[0] == 1 and n > 1:
            a = np.broadcast_to(a, (n, a.shape[1]))
        if controls is None:
            controls = np.empty((cfg.steps, n, a.shape[1]))
        controls[k] = a

        dw0 = sq * noise_block(cfg.seed, _COMMON, path_index, k, 1, d)[0]
        common[k] = dw0
        dw = sq * noise_block(cfg.idio_seed, _IDIO, path_index, k, rows, d)[ids]

        x = (
            x
            + coeffs.drift(t, x, ens, a) * dt
            + _diffuse(np.asarray(coeffs.diffusion(t, x, a), dtype=float), dw)
            + dw0 @ np.asarray(coeffs.common_diffusion(t), dtype=float).T
        )
        if cfg.epsilon > 0.0:
            db = sq * noise_block(cfg.idio_seed, _PERTURB, path_index, k, rows, d)[ids]
            x = x + cfg.epsilon * db
        if not np.isfinite(x).all():
            raise FloatingPointError(f"non-finite state at step {k + 1} (t = {t + dt:.6g})")
        traj[k + 1] = x

    return PathBundle(times, common, traj, controls)


def moment_checks(
    coeffs,
    init: ParticleEnsemble,
    policy,
    cfg: SimConfig,
    p: float = 2.0,
    shift: np.ndarray | None = None,
    h_fractions: tuple = (0.25, 0.5, 1.0),
) -> dict:
    """Empirical constants for the three a priori moment estimates.

    c_growth  bounds E[sup |X|^p]^(1/p) / (1 + E|xi|^p)^(1/p);
    c_lip     bounds E[sup |X - X'|^p]^(1/p) / (E|xi - xi'|^p)^(1/p) for a
              paired run started from a shifted cloud on the same noise;
    c_holder  bounds E[sup_{[t0, t0+h]} |X - xi|^2] / h over sub-horizons.
    """
    bundle = simulate(coeffs, init, policy, cfg)
    sup_abs = np.abs(np.linalg.norm(bundle.trajectories, axis=2)).max(axis=0)  # (n,)
    e_sup = float(np.mean(sup_abs**p))
    e_init = float(np.mean(np.linalg.norm(init.points, axis=1) ** p))
    c_growth = (e_sup / (1.0 + e_init)) ** (1.0 / p)

    c_lip = None
    if shift is not None:
        shift = np.asarray(shift, dtype=float)
        other = simulate(coeffs, translate(init, shift), policy, cfg)
        diffs = np.linalg.norm(bundle.trajectories - other.trajectories, axis=2).max(axis=0)
        c_lip = float(np.mean(diffs**p) ** (1.0 / p) / np.linalg.norm(shift))

    c_holder = {}
    disp = np.linalg.norm(bundle.trajectories - init.points[None], axis=2)  # (steps+1, n)
    for frac in h_fractions:
        k_h = max(1, int(round(frac * cfg.steps)))
        h = k_h * cfg.dt
        e_disp = float(np.mean(disp[: k_h + 1].max(axis=0) ** 2))
        c_holder[h] = e_disp / h

    return {"c_growth": c_growth, "c_lip": c_lip, "c_holder": c_holder, "bundle": bundle}


def ito_expectation_check(
    coeffs,
    init: ParticleEnsemble,
    testfn,
    cfg: SimConfig,
    policy,
    paths: int = 64,
) -> dict:
    """Expectation-level check of the measure-flow chain rule.

    Per common-noise path, lhs_p = phi(t1, mu_{t1}) - phi(t0, mu_0) and rhs_p
    accumulates the drift terms

        dphi/dt + E^1[dmu phi . b] + (1/2) E^1 tr[dxdmu phi sigma sigma^T]
                + (1/2) tr[H phi sigma0 sigma0^T]

    over the time grid; the martingale part has zero mean and is omitted.
    The gap is the path average of lhs_p - rhs_p with its standard error.
    """
    diffs = np.empty(paths)
    lhs_vals = np.empty(paths)
    rhs_vals = np.empty(paths)
    for pidx in range(paths):
        bundle = simulate(coeffs, init, policy, cfg, path_index=pidx)
        mu0 = bundle.ensemble_at(0)
        mu1 = bundle.terminal
        lhs = testfn.value(cfg.t1, mu1) - testfn.value(cfg.t0, mu0)
        rhs = 0.0
        for k in range(cfg.steps):
            t = float(bundle.times[k])
            x = bundle.trajectories[k]
            ens = ParticleEnsemble(x)
            a = bundle.controls_used[k]
            bvec = coeffs.drift(t, x, ens, a)  # (n, d)
            sig = np.asarray(coeffs.diffusion(t, x, a), dtype=float)
            sig0 = np.asarray(coeffs.common_diffusion(t), dtype=float)
            dmu = testfn.dmu(t, ens)  # (n, d)
            dxdmu = testfn.dxdmu(t, ens)  # (n, d, d)
            if sig.ndim == 2:
                ssT = sig @ sig.T
                trace_term = float(np.einsum("nij,ji->n", dxdmu, ssT).mean())
            else:
                trace_term = float(np.einsum("nij,nkj,nik->n", sig, sig, dxdmu).mean())
            h_mat = testfn.h_op(t, ens)
            rhs += cfg.dt * (
                testfn.dt(t, ens)
                + float(np.sum(dmu * bvec, axis=1).mean())
                + 0.5 * trace_term
                + 0.5 * float(np.trace(h_mat @ sig0 @ sig0.T))
            )
        lhs_vals[pidx] = lhs
        rhs_vals[pidx] = rhs
        diffs[pidx] = lhs - rhs
    gap = float(diffs.mean())
    stderr = float(diffs.std(ddof=1) / math.sqrt(paths)) if paths > 1 else float("inf")
    return {
        "lhs": float(lhs_vals.mean()),
        "rhs": float(rhs_vals.mean()),
        "gap": gap,
        "stderr": stderr,
    }


def dump_trajectories(bundle: PathBundle, path: str) -> None:
    """Write (step, particle, coordinates...) rows as CSV."""
    steps, n, d = bundle.trajectories.shape
    with open(path, "w") as fh:
        fh.write("step,particle," + ",".join(f"x{j}" for j in range(d)) + "\n")
        for k in range(steps):
            for i in range(n):
                coords = ",".join(repr(v) for v in bundle.trajectories[k, i])
                fh.write(f"{k},{i},{coords}\n")
