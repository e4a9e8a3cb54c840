"""Client-drift instruments.

``mag_discrepancy`` / ``dir_discrepancy`` compare the global update of one
adapter site with each client's local update. The drift functions check,
by Monte Carlo, how the expected squared norm of a rank-``r`` update grows
with ``r`` when rank-1 factors are correlated across slots: quadratically
for ``B A``, linearly for ``B diag(e) A``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .numerics import ContractError, Rng, frobenius_norm

FLAVORS = ("BA", "BEA")


class UndefinedMetricError(ArithmeticError):
    pass


def _check_shapes(global_dw, local_dws):
    if len(local_dws) == 0:
        raise ContractError("need at least one local model")
    g = np.asarray(global_dw, dtype=np.float64)
    locs = [np.asarray(m, dtype=np.float64) for m in local_dws]
    if any(m.shape != g.shape for m in locs):
        raise ContractError("local and global updates differ in shape")
    return g, locs


def mag_discrepancy(global_dw, local_dws) -> float:
    """Sum over clients of the Frobenius distance to the global update."""
    g, locs = _check_shapes(global_dw, local_dws)
    return float(sum(frobenius_norm(g - m) for m in locs))


def dir_discrepancy(global_dw, local_dws) -> float:
    """Mean cosine similarity between the global update and each local one."""
    g, locs = _check_shapes(global_dw, local_dws)
    gn = frobenius_norm(g)
    total = 0.0
    for m in locs:
        mn = frobenius_norm(m)
        if gn == 0.0 or mn == 0.0:
            raise UndefinedMetricError("cosine similarity of a zero update")
        total += float(np.sum(g * m)) / (gn * mn)
    return total / len(locs)


@dataclass(frozen=True)
class DriftParams:
    d: int = 64
    r_values: tuple = (2, 4, 8, 16, 32)
    tau_b: float = 1.0
    rho_b: float = 0.8
    tau_a: float = 1.0
    rho_a: float = 0.8
    tau_e: float = 1.0
    trials: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.trials < 100:
            raise ContractError(f"trials must be >= 100, got {self.trials}")
        if self.d < 1 or not self.r_values or min(self.r_values) < 1:
            raise ContractError("d and every r value must be >= 1")
        for tau, rho, name in ((self.tau_b, self.rho_b, "b"), (self.tau_a, self.rho_a, "a")):
            if not 0 <= rho < tau:
                raise ContractError(f"need 0 <= rho_{name} < tau_{name}")
        if not self.tau_e > 0:
            raise ContractError("tau_e must be positive")


@dataclass(frozen=True)
class DriftRow:
    flavor: str
    r: int
    mc_mean: float
    stderr: float
    closed_form: float

    @property
    def z(self) -> float:
        return (self.mc_mean - self.closed_form) / self.stderr


@dataclass(frozen=True)
class DriftReport:
    rows: tuple
    slopes: dict

    def row(self, flavor: str, r: int) -> DriftRow:
        return next(x for x in self.rows if x.flavor == flavor and x.r == r)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["flavor", "r", "mc_mean", "stderr", "closed_form", "slope"])
        for x in self.rows:
            w.writerow([x.flavor, x.r, f"{x.mc_mean:.6f}", f"{x.stderr:.6f}",
                        f"{x.closed_form:.6f}", f"{self.slopes[x.flavor]:.6f}"])
        return buf.getvalue()


def drift_closed_form(params: DriftParams, flavor: str, r: int) -> float:
    p = params
    if flavor == "BA":
        return r * p.tau_b * p.tau_a + r * (r - 1) * p.rho_b * p.rho_a
    if flavor == "BEA":
        return r * p.tau_e * p.tau_b * p.tau_a
    raise ContractError(f"unknown flavor {flavor!r}")


def _correlated_columns(rng: Rng, trials: int, d: int, r: int, tau: float, rho: float) -> np.ndarray:
    # shared mean + independent residual: E[x_i.x_j] = rho (i != j), tau (i == j)
    mu = rng.fork("mean").normal((trials, d, 1), np.sqrt(rho / d))
    xi = rng.fork("resid").normal((trials, d, r), np.sqrt((tau - rho) / d))
    return mu + xi


def squared_norms(rng: Rng, params: DriftParams, r: int) -> dict[str, np.ndarray]:
    """Per-trial ``||dW||_F^2`` for both flavours at rank ``r``.

    Uses ``||sum_i e_i b_i a_i^T||^2 = sum_ij e_i e_j (b_i.b_j)(a_i.a_j)``.
    """
    p = params
    b = _correlated_columns(rng.fork("b"), p.trials, p.d, r, p.tau_b, p.rho_b)
    a = _correlated_columns(rng.fork("a"), p.trials, p.d, r, p.tau_a, p.rho_a)
    e = rng.fork("e").normal((p.trials, r), np.sqrt(p.tau_e))
    gram = np.einsum("tki,tkj->tij", b, b) * np.einsum("tki,tkj->tij", a, a)
    return {
        "BA": gram.sum(axis=(1, 2)),
        "BEA": np.einsum("ti,tij,tj->t", e, gram, e),
    }


def loglog_slope(rs, values) -> float:
    x = np.log(np.asarray(rs, dtype=np.float64))
    y = np.log(np.asarray(values, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


def drift_monte_carlo(params: DriftParams) -> DriftReport:
    root = Rng(params.seed).fork("drift")
    means = {f: [] for f in FLAVORS}
    rows = []
    for r in params.r_values:
        samples = squared_norms(root.fork(f"r={r}"), params, r)
        for f in FLAVORS:
            x = samples[f]
            mean = float(x.mean())
            se = float(x.std(ddof=1) / np.sqrt(x.size))
            means[f].append(mean)
            rows.append(DriftRow(f, r, mean, se, drift_closed_form(params, f, r)))
    rows.sort(key=lambda x: (FLAVORS.index(x.flavor), x.r))
    slopes = {f: loglog_slope(params.r_values, means[f]) for f in FLAVORS}
    return DriftReport(tuple(rows), slopes)
