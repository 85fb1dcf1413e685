"""ABX psychophysics: response model, fitting, bootstrap, simulation.

The response model chains three pieces: a gated quadratic detectability
link d2(s) = beta0 * (1 - s0^2/s^2) for s > s0 (zero otherwise), the
two-interval ABX proportion correct

    PC = Phi(d2/sqrt(6)) Phi(d2/2) + Phi(-d2/sqrt(6)) Phi(-d2/2),

and an affine lapse wrap PC_obs = lambda + (1 - 2 lambda) PC. Fitting is
count-weighted least squares on per-scale empirical proportions with the
lapse rate box-constrained to [0, 0.06]; confidence intervals come from
a trial-level percentile bootstrap.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

__all__ = [
    "CONDITIONS",
    "LAPSE_MAX",
    "TrialRecord",
    "PsychometricFit",
    "detectability",
    "pc_abx_from_d2",
    "pc_abx",
    "pc_with_lapse",
    "empirical_pc",
    "fit_psychometric",
    "fit_with_shared_lapse",
    "bootstrap_ci",
    "simulate_observer",
    "pool_observers",
    "write_trials",
    "read_trials",
    "format_fit_report",
]

CONDITIONS = ("synth-vs-synth", "synth-vs-reference")
LAPSE_MAX = 0.06

_S0_BOUNDS = (1e-3, 10.0)
_BETA_BOUNDS = (1e-3, 100.0)
# characteristic parameter magnitudes; least_squares conditions its trust
# region on these (s0 near 0.5, beta0 in the ones, lapse in the hundredths)
_X_SCALE = (0.5, 5.0, 0.02)

# documented start grid for the multi-start fit; seeded perturbations of
# the best grid start are appended at fit time
_START_GRID = tuple(
    (s0, b0, 0.01) for s0 in (0.2, 0.4, 0.6) for b0 in (1.0, 3.0, 8.0)
)


def detectability(s, s0: float, beta0: float):
    """Gated detectability: beta0 * (1 - s0^2/s^2) above s0, else 0."""
    if s0 <= 0 or beta0 <= 0:
        raise ValueError("s0 and beta0 must be positive")
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("scales must be positive")
    d2 = np.where(s > s0, beta0 * (1.0 - (s0 * s0) / (s * s)), 0.0)
    return float(d2) if d2.ndim == 0 else d2


def pc_abx_from_d2(d2):
    """ABX proportion correct as a function of the detectability index."""
    d2 = np.asarray(d2, dtype=np.float64)
    a = special.ndtr(d2 / np.sqrt(6.0))
    b = special.ndtr(d2 / 2.0)
    pc = a * b + (1.0 - a) * (1.0 - b)
    return float(pc) if pc.ndim == 0 else pc


def pc_abx(s, s0: float, beta0: float):
    return pc_abx_from_d2(detectability(s, s0, beta0))


def pc_with_lapse(s, s0: float, beta0: float, lapse: float):
    """Lapse-wrapped proportion correct: lapse + (1 - 2 lapse) PC."""
    if not 0.0 <= lapse <= LAPSE_MAX:
        raise ValueError(f"lapse {lapse} outside [0, {LAPSE_MAX}]")
    pc = pc_abx(s, s0, beta0)
    return lapse + (1.0 - 2.0 * lapse) * pc


@dataclass(frozen=True)
class TrialRecord:
    """One ABX trial as logged by a session."""

    session_id: str
    condition: str
    scale: float
    image_id: str
    stimulus_a: str
    stimulus_b: str
    stimulus_x: str
    response: str
    correct: bool
    response_time_ms: float
    timestamp: str

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ValueError(f"condition {self.condition!r} not in {CONDITIONS}")
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.response not in ("A", "B"):
            raise ValueError(f"response {self.response!r} must be 'A' or 'B'")


def write_trials(path, trials) -> None:
    """Append-friendly JSON-lines trial log, one record per line."""
    with open(path, "w") as fh:
        for trial in trials:
            fh.write(json.dumps(dataclasses.asdict(trial)) + "\n")


def read_trials(path) -> list:
    trials = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                trials.append(TrialRecord(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise ValueError(f"{path}:{line_no}: bad trial record: {exc}") from exc
    return trials


@dataclass(frozen=True)
class PsychometricFit:
    """Fitted response model for one condition, with optional CIs."""

    condition: str
    s0: float
    beta0: float
    lapse: float
    n_trials: int
    ci_s0: tuple | None = None
    ci_beta0: tuple | None = None
    ci_lapse: tuple | None = None
    diagnostics: dict = field(default_factory=dict)

    def predict(self, s):
        return pc_with_lapse(s, self.s0, self.beta0, self.lapse)


def empirical_pc(trials, condition: str) -> dict:
    """Per-scale (n trials, proportion correct) for one condition."""
    if condition not in CONDITIONS:
        raise ValueError(f"condition {condition!r} not in {CONDITIONS}")
    counts: dict = {}
    for t in trials:
        if t.condition != condition:
            continue
        n, k = counts.get(t.scale, (0, 0))
        counts[t.scale] = (n + 1, k + int(t.correct))
    return {s: (n, k / n) for s, (n, k) in counts.items()}


_INV_SQRT6 = 1.0 / np.sqrt(6.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _model_parts(scales, s2, s0, beta0, lapse):
    """Response model plus the intermediates its jacobian reuses.

    Inlines detectability -> pc_abx -> lapse wrap without the per-call
    validation of the public functions; the optimizer bounds already
    guarantee positive parameters and an in-range lapse.
    """
    d2 = np.where(scales > s0, beta0 * (1.0 - (s0 * s0) / s2), 0.0)
    a = special.ndtr(d2 * _INV_SQRT6)
    b = special.ndtr(d2 * 0.5)
    pc = 1.0 - a - b + 2.0 * a * b
    return lapse + (1.0 - 2.0 * lapse) * pc, d2, a, b, pc


def _model_jacobian(scales, s2, s0, beta0, lapse, d2, a, b, pc, free_lapse):
    """d(model)/d(params) with the gate's zero branch giving zero slope."""
    phi_a = np.exp(-0.5 * (d2 * _INV_SQRT6) ** 2) * _INV_SQRT2PI * _INV_SQRT6
    phi_b = np.exp(-0.5 * (d2 * 0.5) ** 2) * _INV_SQRT2PI * 0.5
    dpc_dd2 = phi_a * (2.0 * b - 1.0) + phi_b * (2.0 * a - 1.0)
    gate = scales > s0
    dd2_ds0 = np.where(gate, -2.0 * beta0 * s0 / s2, 0.0)
    dd2_db0 = np.where(gate, 1.0 - (s0 * s0) / s2, 0.0)
    k = 1.0 - 2.0 * lapse
    cols = [k * dpc_dd2 * dd2_ds0, k * dpc_dd2 * dd2_db0]
    if free_lapse:
        cols.append(1.0 - 2.0 * pc)
    return np.stack(cols, axis=1)


def _projected_lm(scales, weights, pcs, lapse_fixed, start, lower, upper,
                  max_iter=40):
    """Box-bounded Levenberg-Marquardt with the analytic jacobian.

    Specialized to the response model so refit-heavy callers (the
    bootstrap makes one warm-started solve per resample) skip generic
    solver overhead. Steps solve (J^T J + mu diag(J^T J)) dx = -J^T r
    and are clipped to the box. Converged means a small projected
    gradient, dead relative cost progress, or an exhausted damping
    sweep after at least one accepted step (the hinge where s0 meets a
    data scale is a genuine minimum with nonzero gradient). Hitting the
    iteration cap or failing to improve on the start at all returns
    (None, reason) so the caller's generic solvers can take over.
    """
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    x = np.clip(np.asarray(start, dtype=np.float64), lower, upper)
    s2 = scales * scales
    sqrt_w = np.sqrt(weights)
    free_lapse = lapse_fixed is None

    def evaluate(p):
        lam = p[2] if free_lapse else lapse_fixed
        return _model_parts(scales, s2, p[0], p[1], lam)

    parts = evaluate(x)
    r = sqrt_w * (pcs - parts[0])
    cost = float(r @ r)
    mu = 1e-3
    ever_accepted = False
    for _ in range(max_iter):
        lam = x[2] if free_lapse else lapse_fixed
        jac = -sqrt_w[:, None] * _model_jacobian(
            scales, s2, x[0], x[1], lam, *parts[1:], free_lapse
        )
        grad = jac.T @ r
        # gradient components pushing out of an active bound cannot move x;
        # solving only over the free coordinates keeps steps exact on the
        # face (a clipped full step zigzags instead of converging)
        pinned = ((x <= lower) & (grad > 0)) | ((x >= upper) & (grad < 0))
        pg = np.where(pinned, 0.0, grad)
        if np.max(np.abs(pg)) < 1e-8:
            return list(x), cost
        free = ~pinned
        jtj = jac.T @ jac
        jtj_free = jtj[np.ix_(free, free)]
        damp = np.diag(np.maximum(np.diag(jtj_free), 1e-12))
        accepted = False
        for _ in range(16):
            try:
                dx_free = np.linalg.solve(jtj_free + mu * damp, -grad[free])
            except np.linalg.LinAlgError:
                mu *= 8.0
                continue
            dx = np.zeros_like(x)
            dx[free] = dx_free
            x_new = np.clip(x + dx, lower, upper)
            parts_new = evaluate(x_new)
            r_new = sqrt_w * (pcs - parts_new[0])
            cost_new = float(r_new @ r_new)
            if cost_new <= cost:
                accepted = True
                break
            mu *= 8.0
        if not accepted:
            if ever_accepted:
                return list(x), cost
            return None, "no improving step from the start point"
        ever_accepted = True
        drop = cost - cost_new
        x, parts, r, cost = x_new, parts_new, r_new, cost_new
        mu = max(mu * 0.25, 1e-12)
        # tighter than the generic solver's 1e-8 relative cost tolerance
        if drop <= 1e-10 * max(cost, 1e-30):
            return list(x), cost
    return None, "iteration budget exhausted"


def _minimize_once(scales, weights, pcs, lapse_fixed, start):
    """One local minimization of the count-weighted squared error.

    A model-specific projected Levenberg-Marquardt runs first; if it
    stalls (the gated model has a derivative kink wherever s0 crosses a
    data scale), the generic trust-region solver retries, and a failed
    or budget-exhausted run falls back to Nelder-Mead, which does not
    differentiate. Returns (params, cost) or (None, reason).
    """
    if lapse_fixed is None:
        lower = [_S0_BOUNDS[0], _BETA_BOUNDS[0], 0.0]
        upper = [_S0_BOUNDS[1], _BETA_BOUNDS[1], LAPSE_MAX]

        def model(p):
            return pc_with_lapse(scales, p[0], p[1], p[2])
    else:
        if not 0.0 <= lapse_fixed <= LAPSE_MAX:
            raise ValueError(f"lapse {lapse_fixed} outside [0, {LAPSE_MAX}]")
        lower = [_S0_BOUNDS[0], _BETA_BOUNDS[0]]
        upper = [_S0_BOUNDS[1], _BETA_BOUNDS[1]]

        def model(p):
            return pc_with_lapse(scales, p[0], p[1], lapse_fixed)

    scales = np.asarray(scales, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    pcs = np.asarray(pcs, dtype=np.float64)
    params, cost = _projected_lm(
        scales, weights, pcs, lapse_fixed, start, lower, upper
    )
    if params is not None:
        return params, cost

    sqrt_w = np.sqrt(weights)

    def residuals(p):
        return sqrt_w * (pcs - model(p))

    try:
        res = optimize.least_squares(
            residuals, np.clip(start, lower, upper), bounds=(lower, upper),
            method="trf", x_scale=_X_SCALE[: len(lower)], max_nfev=600,
        )
        if res.success:
            return list(res.x), 2.0 * float(res.cost)
    except Exception:
        pass

    def cost(p):
        return float(np.sum(weights * (pcs - model(p)) ** 2))

    res = optimize.minimize(
        cost, np.clip(start, lower, upper), method="Nelder-Mead",
        bounds=list(zip(lower, upper)),
        options={"xatol": 1e-8, "fatol": 1e-12, "maxfev": 4000},
    )
    if res.success:
        return list(res.x), float(res.fun)
    return None, res.message


def _fit_curve(scales, weights, pcs, lapse_fixed, seed, n_random_starts=3):
    """Count-weighted least squares over (s0, beta0[, lapse]).

    Returns (params, cost, diagnostics). Multi-start: the documented grid
    plus seeded perturbations of the best grid start.
    """
    scales = np.asarray(scales, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    pcs = np.asarray(pcs, dtype=np.float64)
    starts = [
        np.array(s if lapse_fixed is None else s[:2]) for s in _START_GRID
    ]

    best = None
    failures = []
    for start in starts:
        params, cost = _minimize_once(scales, weights, pcs, lapse_fixed, start)
        if params is None:
            failures.append(str(cost))
        elif best is None or cost < best[1]:
            best = (params, cost)
    if best is not None:
        rng = np.random.default_rng(seed)
        base = np.array(best[0])
        for _ in range(n_random_starts):
            start = base * rng.lognormal(0.0, 0.15, size=base.size)
            params, cost = _minimize_once(scales, weights, pcs, lapse_fixed, start)
            if params is not None and cost < best[1]:
                best = (params, cost)
    if best is None:
        raise RuntimeError(
            "psychometric fit did not converge from any start; reasons: "
            + "; ".join(failures)
        )
    params = best[0] + ([lapse_fixed] if lapse_fixed is not None else [])
    return params, best[1], {"n_starts": len(starts), "cost": best[1]}


def fit_psychometric(
    trials, condition: str, lapse: float | None = None, seed: int = 0
) -> PsychometricFit:
    """Count-weighted least-squares fit of (s0, beta0, lapse) for one condition.

    Passing lapse fixes the lapse rate and fits only (s0, beta0), which
    the shared-lapse mode uses for its refits.

    Raises:
        ValueError: Fewer than 2 distinct scales for the condition.
        RuntimeError: No optimizer start converged (message lists attempts).
    """
    table = empirical_pc(trials, condition)
    if len(table) < 2:
        raise ValueError(
            f"condition {condition!r}: need trials at >= 2 distinct scales, "
            f"got {len(table)}"
        )
    scales = sorted(table)
    weights = [table[s][0] for s in scales]
    pcs = [table[s][1] for s in scales]
    params, cost, diag = _fit_curve(scales, weights, pcs, lapse, seed)
    diag["per_scale"] = {s: table[s] for s in scales}
    if all(pc >= 1.0 for pc in pcs):
        diag["ceiling"] = True
    return PsychometricFit(
        condition=condition,
        s0=float(params[0]),
        beta0=float(params[1]),
        lapse=float(params[2]),
        n_trials=int(sum(weights)),
        diagnostics=diag,
    )


def fit_with_shared_lapse(trials, conditions=CONDITIONS, seed: int = 0) -> dict:
    """One lapse estimate across conditions: fit each freely, average the
    lapse rates, then refit (s0, beta0) per condition with the pooled value."""
    free_fits = {c: fit_psychometric(trials, c, seed=seed) for c in conditions}
    pooled = float(np.mean([f.lapse for f in free_fits.values()]))
    pooled = min(max(pooled, 0.0), LAPSE_MAX)
    return {c: fit_psychometric(trials, c, lapse=pooled, seed=seed) for c in conditions}


def _ci_from_estimates(col, theta_hat, level, method):
    """One parameter's CI from its bootstrap estimates.

    percentile quotes the resample quantiles directly; basic reflects
    them around the point estimate, which also removes first-order
    estimator bias; bc shifts the quantile levels by the median bias of
    the bootstrap distribution (bias-corrected, zero acceleration).
    """
    lo_q, hi_q = (1 - level) / 2, (1 + level) / 2
    if method == "percentile":
        lo, hi = np.percentile(col, [100 * lo_q, 100 * hi_q])
    elif method == "basic":
        p_lo, p_hi = np.percentile(col, [100 * lo_q, 100 * hi_q])
        lo, hi = 2 * theta_hat - p_hi, 2 * theta_hat - p_lo
    elif method == "bc":
        # mid-p handles the heaping of refit estimates at the point estimate
        frac = (np.sum(col < theta_hat) + 0.5 * np.sum(col == theta_hat)) / len(col)
        z0 = special.ndtri(np.clip(frac, 1e-6, 1 - 1e-6))
        a_lo = special.ndtr(2 * z0 + special.ndtri(lo_q))
        a_hi = special.ndtr(2 * z0 + special.ndtri(hi_q))
        lo, hi = np.percentile(col, [100 * a_lo, 100 * a_hi])
    else:
        raise ValueError(f"unknown CI method {method!r}")
    return float(lo), float(hi)


def bootstrap_ci(
    trials,
    condition: str,
    n: int = 10000,
    level: float = 0.68,
    seed: int = 0,
    lapse: float | None = None,
    max_failure_fraction: float = 0.05,
    method: str = "basic",
) -> PsychometricFit:
    """Trial-resampling bootstrap CIs around the full fit.

    Trials of the condition are resampled with replacement (the trial is
    the resampling unit); each resample is refitted warm-started from the
    full fit. CIs at the given level are attached to the returned fit.
    The default interval is the basic (reverse-percentile) bootstrap: the
    critical-scale estimator is biased when the true value falls between
    sampled scales, and reflecting the quantiles around the point
    estimate cancels that bias to first order where plain percentiles
    inherit it.

    Raises:
        RuntimeError: More than max_failure_fraction of resample fits fail.
    """
    full = fit_psychometric(trials, condition, lapse=lapse, seed=seed)
    pool = [t for t in trials if t.condition == condition]
    rng = np.random.default_rng(seed)
    warm = np.array(
        [full.s0, full.beta0] + ([] if lapse is not None else [full.lapse])
    )
    # per-resample count tables via bincount over scale indices: the
    # resample loop is fit-bound, not bookkeeping-bound
    scale_of = np.array([t.scale for t in pool], dtype=np.float64)
    correct_of = np.array([t.correct for t in pool], dtype=np.float64)
    uniq = np.unique(scale_of)
    index_of = np.searchsorted(uniq, scale_of)

    estimates = []
    failures = 0
    for _ in range(n):
        take = rng.integers(0, len(pool), size=len(pool))
        counts = np.bincount(index_of[take], minlength=len(uniq))
        hits = np.bincount(
            index_of[take], weights=correct_of[take], minlength=len(uniq)
        )
        seen = counts > 0
        if np.count_nonzero(seen) < 2:
            failures += 1
            continue
        weights = counts[seen].astype(np.float64)
        params, _ = _minimize_once(
            uniq[seen], weights, hits[seen] / weights, lapse, warm
        )
        if params is None:
            failures += 1
            continue
        estimates.append(params + ([lapse] if lapse is not None else []))

    if failures > max_failure_fraction * n:
        raise RuntimeError(
            f"bootstrap: {failures}/{n} resample fits failed "
            f"(> {max_failure_fraction:.0%} allowed)"
        )
    est = np.array(estimates)
    point = (full.s0, full.beta0, full.lapse)
    # reflected (basic) intervals can spill past the parameter space;
    # intersecting with the fit bounds keeps every endpoint feasible
    bounds = (_S0_BOUNDS, _BETA_BOUNDS, (0.0, LAPSE_MAX))
    ci = []
    for i in range(3):
        lo, hi = _ci_from_estimates(est[:, i], point[i], level, method)
        ci.append((max(lo, bounds[i][0]), min(hi, bounds[i][1])))
    diag = dict(full.diagnostics)
    diag.update(
        {
            "n_bootstrap": n,
            "n_failures": failures,
            "ci_method": method,
            # refit extremes let callers audit that bound constraints held
            "lapse_range": (float(est[:, 2].min()), float(est[:, 2].max())),
        }
    )
    return dataclasses.replace(
        full, ci_s0=ci[0], ci_beta0=ci[1], ci_lapse=ci[2], diagnostics=diag
    )


def simulate_observer(
    s0: float,
    beta0: float,
    lapse: float,
    scales,
    trials_per_scale: int,
    condition: str = "synth-vs-synth",
    seed: int = 0,
    session_id: str = "simulated",
) -> list:
    """Bernoulli observer whose success rate is the lapse-wrapped model PC."""
    rng = np.random.default_rng(seed)
    trials = []
    tick = 0
    for scale in scales:
        pc = pc_with_lapse(scale, s0, beta0, lapse)
        for i in range(trials_per_scale):
            correct = bool(rng.random() < pc)
            x_is_a = bool(rng.random() < 0.5)
            truth = "A" if x_is_a else "B"
            response = truth if correct else ("B" if x_is_a else "A")
            trials.append(
                TrialRecord(
                    session_id=session_id,
                    condition=condition,
                    scale=float(scale),
                    image_id=f"img-{i % 10:03d}",
                    stimulus_a=f"stim-{tick}-a",
                    stimulus_b=f"stim-{tick}-b",
                    stimulus_x=f"stim-{tick}-x",
                    response=response,
                    correct=correct,
                    response_time_ms=float(rng.lognormal(6.5, 0.3)),
                    timestamp=f"2026-01-01T00:00:{tick % 60:02d}Z",
                )
            )
            tick += 1
    return trials


def pool_observers(fits) -> PsychometricFit:
    """Arithmetic mean of per-observer point estimates (one condition)."""
    fits = list(fits)
    if not fits:
        raise ValueError("no fits to pool")
    conditions = {f.condition for f in fits}
    if len(conditions) != 1:
        raise ValueError(f"fits mix conditions {sorted(conditions)}")
    return PsychometricFit(
        condition=fits[0].condition,
        s0=float(np.mean([f.s0 for f in fits])),
        beta0=float(np.mean([f.beta0 for f in fits])),
        lapse=float(np.mean([f.lapse for f in fits])),
        n_trials=int(sum(f.n_trials for f in fits)),
        diagnostics={"pooled_from": len(fits)},
    )


def _format_ci(ci) -> str:
    return f"[{ci[0]:.4f}, {ci[1]:.4f}]" if ci else "n/a"


def format_fit_report(fits) -> str:
    """Structured text report for one or more condition fits."""
    if isinstance(fits, PsychometricFit):
        fits = [fits]
    lines = ["psychometric fits"]
    for f in fits:
        lines.append(f"condition: {f.condition} (n = {f.n_trials})")
        lines.append(f"  critical scale s0 = {f.s0:.4f}  68% CI {_format_ci(f.ci_s0)}")
        lines.append(f"  absorbing factor beta0 = {f.beta0:.4f}  CI {_format_ci(f.ci_beta0)}")
        lines.append(f"  lapse rate = {f.lapse:.4f}  CI {_format_ci(f.ci_lapse)}")
        if f.diagnostics.get("ceiling"):
            lines.append("  warning: every scale at ceiling (all responses correct)")
    return "\n".join(lines)
