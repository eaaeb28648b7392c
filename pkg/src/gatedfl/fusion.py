"""Scalar-coefficient fusion of adapters, tuned by Nelder-Mead on a query set."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lora import DenseDelta, fuse
from .tinylm import TinyLM, mean_loss


@dataclass(frozen=True)
class FusionConfig:
    psi: float = 0.01
    query_set_size: int = 16
    budget: int = 200
    coeff_bounds: tuple[float, float] = (-1.5, 1.5)
    restarts: int = 3
    start: float = 0.5
    xatol: float = 1e-3
    fatol: float = 1e-5

    def problems(self) -> list[str]:
        out = []
        if self.psi < 0:
            out.append("psi must be >= 0")
        if self.budget < 10:
            out.append("budget must be >= 10")
        if self.query_set_size < 1:
            out.append("query_set_size must be >= 1")
        lo, hi = self.coeff_bounds
        if not lo < hi:
            out.append("coeff_bounds must satisfy lo < hi")
        elif not lo <= self.start <= hi:
            out.append("start must lie within coeff_bounds")
        if self.restarts < 0:
            out.append("restarts must be >= 0")
        return out

    def __post_init__(self):
        object.__setattr__(self, "coeff_bounds", tuple(float(b) for b in self.coeff_bounds))
        errs = self.problems()
        if errs:
            raise ValueError("; ".join(errs))


@dataclass
class FusionResult:
    coeffs: np.ndarray
    loss: float
    start_loss: float
    improved: bool
    trace: list[tuple[list[float], float]] = field(default_factory=list)

    @property
    def evaluations(self) -> int:
        return len(self.trace)


def fusion_loss(coeffs, adapters, model: TinyLM, query_seqs, psi: float,
                bounds: tuple[float, float] | None = None) -> float:
    """Token-mean cross-entropy of the fused model plus ``psi * sum|c|``."""
    c = np.asarray(coeffs, dtype=np.float64)
    if bounds is not None and (c.min() < bounds[0] or c.max() > bounds[1]):
        raise ValueError(f"coefficients {c.tolist()} outside bounds {bounds}")
    if not query_seqs:
        raise ValueError("query set is empty")
    ce = mean_loss(model, fuse(adapters, c), query_seqs)
    return ce + psi * float(np.abs(c).sum())


def nelder_mead(f, x0, lo: float, hi: float, max_evals: int, xatol: float = 1e-3,
                fatol: float = 1e-5, step: float = 0.25):
    """Box-constrained Nelder-Mead (points are clipped into the box).

    Returns ``(best_x, best_f, n_evals)``; never evaluates more than ``max_evals`` points.
    """
    n = len(x0)
    evals = 0

    def call(x):
        nonlocal evals
        evals += 1
        return f(x)

    x0 = np.clip(np.asarray(x0, dtype=np.float64), lo, hi)
    simplex = [x0]
    for i in range(n):
        x = x0.copy()
        x[i] = x[i] + step if x[i] + step <= hi else x[i] - step
        simplex.append(x)
    fs = []
    for x in simplex:
        if evals >= max_evals:
            break
        fs.append(call(x))
    simplex = simplex[:len(fs)]
    if len(fs) < n + 1:
        i = int(np.argmin(fs))
        return simplex[i], fs[i], evals

    while evals < max_evals:
        order = np.argsort(fs, kind="stable")
        simplex = [simplex[i] for i in order]
        fs = [fs[i] for i in order]
        spread_x = max(np.abs(x - simplex[0]).max() for x in simplex[1:])
        if fs[-1] - fs[0] <= fatol and spread_x <= xatol:
            break
        centroid = np.mean(simplex[:-1], axis=0)
        worst = simplex[-1]
        xr = np.clip(centroid + (centroid - worst), lo, hi)
        fr = call(xr)
        if fr < fs[0]:
            if evals >= max_evals:
                simplex[-1], fs[-1] = xr, fr
                break
            xe = np.clip(centroid + 2.0 * (centroid - worst), lo, hi)
            fe = call(xe)
            simplex[-1], fs[-1] = (xe, fe) if fe < fr else (xr, fr)
        elif fr < fs[-2]:
            simplex[-1], fs[-1] = xr, fr
        else:
            if evals >= max_evals:
                break
            if fr < fs[-1]:
                xc = centroid + 0.5 * (xr - centroid)
            else:
                xc = centroid + 0.5 * (worst - centroid)
            fc = call(xc)
            if fc < min(fr, fs[-1]):
                simplex[-1], fs[-1] = xc, fc
            else:
                # shrink toward the best vertex
                for i in range(1, len(simplex)):
                    if evals >= max_evals:
                        break
                    simplex[i] = simplex[0] + 0.5 * (simplex[i] - simplex[0])
                    fs[i] = call(simplex[i])
    i = int(np.argmin(fs))
    return simplex[i], fs[i], evals


def minimize(f, n: int, cfg: FusionConfig, seed: int) -> FusionResult:
    """Nelder-Mead from the uniform start, then ``cfg.restarts`` random restarts.

    The whole search shares ``cfg.budget`` objective evaluations. The start
    point is always evaluated first, so the result is never worse than it.
    """
    lo, hi = cfg.coeff_bounds
    trace: list[tuple[list[float], float]] = []

    def g(x):
        x = np.clip(np.asarray(x, dtype=np.float64), lo, hi)
        val = float(f(x))
        trace.append((x.tolist(), val))
        return val

    start = np.full(n, cfg.start)
    start_loss = g(start)
    rng = np.random.default_rng(seed)
    starts = [start] + [rng.uniform(lo, hi, size=n) for _ in range(cfg.restarts)]
    per_run = max((cfg.budget - 1) // len(starts), n + 1)
    for x0 in starts:
        remaining = cfg.budget - len(trace)
        if remaining <= 0:
            break
        nelder_mead(g, x0, lo, hi, min(per_run, remaining), cfg.xatol, cfg.fatol)
    best = min(range(len(trace)), key=lambda i: (trace[i][1], i))
    coeffs, loss = np.array(trace[best][0]), trace[best][1]
    return FusionResult(coeffs, loss, start_loss, loss < start_loss, trace)


def optimize_coeffs(adapters, model: TinyLM, query_seqs, cfg: FusionConfig,
                    seed: int = 0) -> FusionResult:
    adapters = list(adapters)
    if len(adapters) < 2:
        raise ValueError("fusion needs at least two adapters")
    if not query_seqs:
        raise ValueError("query set is empty")
    return minimize(lambda c: fusion_loss(c, adapters, model, query_seqs, cfg.psi),
                    len(adapters), cfg, seed)


def _personalize(global_adapter, local_adapter, query_seqs, model, cfg, seed, kind):
    if not query_seqs:
        raise ValueError(f"{kind} fusion needs a non-empty query set")
    query_seqs = query_seqs[: cfg.query_set_size]
    res = optimize_coeffs([global_adapter, local_adapter], model, query_seqs, cfg, seed)
    delta = fuse([global_adapter, local_adapter], res.coeffs)
    delta.info = {"kind": kind, "coeffs": res.coeffs.tolist(), "evaluations": res.evaluations,
                  "improved": res.improved}
    return delta, res


def build_secure_personalized(global_adapter, local_secure, query_masked, model: TinyLM,
                              cfg: FusionConfig, seed: int = 0):
    """Fuse the global adapter with the client's secure adapter on masked query docs."""
    delta, res = _personalize(global_adapter, local_secure, query_masked, model, cfg, seed,
                              "secure")
    return delta, res


def build_revealing_personalized(global_adapter, local_revealing, query_raw, model: TinyLM,
                                 cfg: FusionConfig, seed: int = 0):
    """Same as the secure path but on raw query docs; the result never leaves the client."""
    delta, res = _personalize(global_adapter, local_revealing, query_raw, model, cfg, seed,
                              "revealing")
    delta.local_only = True
    return delta, res


def fusion_report(res: FusionResult, psi: float, delta: DenseDelta | None = None) -> dict:
    c = res.coeffs
    l1 = float(np.abs(c).sum())
    start_l1 = float(np.abs(np.asarray(res.trace[0][0])).sum())
    return {
        "kind": (delta.info.get("kind") if delta is not None else None),
        "coefficients": c.tolist(),
        "objective": res.loss,
        "objective_start": res.start_loss,
        "improved": res.improved,
        "evaluations": res.evaluations,
        "ppl_before": math.exp(res.start_loss - psi * start_l1),
        "ppl_after": math.exp(res.loss - psi * l1),
        "trace": [{"coeffs": x, "objective": v} for x, v in res.trace],
    }
