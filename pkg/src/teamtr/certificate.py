"""Lower-bound certificates for sequential trust-region updates.

All bounds take scalar summaries (surrogates, radii, advantage ranges) so the
same code serves exact-input audits and sampled-input estimates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, EstimationError, ValidationError

SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class CertificateConfig:
    gamma: float
    a_max: float
    a_clip: float = 3.0
    ppo_eps: float = 0.2
    confidence_delta: float = 0.05
    zeta_mode: str = "proxy"  # proxy | exact-mc | oracle

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise DomainError("gamma must lie in (0, 1)")
        if self.a_max < 0 or self.a_clip <= 0:
            raise DomainError("advantage ranges must be non-negative")
        if not 0 < self.confidence_delta < 1:
            raise DomainError("confidence level must lie in (0, 1)")
        if self.zeta_mode not in ("proxy", "exact-mc", "oracle"):
            raise DomainError(f"unknown zeta mode {self.zeta_mode!r}")


@dataclass
class StageCertificate:
    lower_bound: float
    terms: dict = field(default_factory=dict)
    per_step: list = field(default_factory=list)
    violation: bool | None = None
    realized: float | None = None


def _check_radii(radii):
    r = np.asarray(radii, dtype=float)
    if np.any(r < 0) or not np.all(np.isfinite(r)):
        raise DomainError("radii must be finite and non-negative")
    return r


def occ_shift_bound(kl: float, f_sup: float, gamma: float) -> float:
    """|E_{d'} f - E_d f| <= sqrt(2) g / (1-g) * sqrt(kl) * ||f||_inf."""
    if kl < 0:
        raise DomainError("KL must be non-negative")
    return SQRT2 * gamma / (1 - gamma) * np.sqrt(kl) * f_sup


def cumulative_shift_bound(radii, f_sup: float, gamma: float) -> float:
    """Occupancy drift of a chain of intermediates: sum of per-step shift bounds."""
    r = _check_radii(radii)
    return SQRT2 * gamma / (1 - gamma) * f_sup * float(np.sum(np.sqrt(r)))


def stale_gap_bound(radii_before, a_max: float, gamma: float) -> float:
    """|L_seq_i - L_stale_i| bound from the radii of the updates preceding step i."""
    r = _check_radii(radii_before)
    return SQRT2 * gamma / (1 - gamma) ** 2 * a_max * float(np.sum(np.sqrt(r)))


def single_step_bound(surrogate: float, delta: float, a_max: float, gamma: float, zeta: float = 0.0) -> dict:
    """J(new) - J(old) >= L_seq - sqrt(2) g/(1-g)^2 A_max sqrt(delta) - zeta/(1-g)."""
    if delta < 0:
        raise DomainError("radius must be non-negative")
    if zeta < 0:
        raise DomainError("zeta must be non-negative")
    occ = SQRT2 * gamma / (1 - gamma) ** 2 * a_max * np.sqrt(delta)
    bias = zeta / (1 - gamma)
    return {"surrogate": surrogate, "occupancy": occ, "estimation": bias, "lower_bound": surrogate - occ - bias}


def stage_bound(surrogates, radii, a_max, gamma: float, zetas=None) -> StageCertificate:
    """Telescoped single-step bounds; a_max may be a scalar or per-step sequence."""
    r = _check_radii(radii)
    L = np.asarray(surrogates, float)
    if L.shape != r.shape:
        raise ValidationError("one surrogate per radius")
    a = np.broadcast_to(np.asarray(a_max, float), r.shape)
    z = np.zeros_like(r) if zetas is None else np.asarray(zetas, float)
    steps = [single_step_bound(L[i], r[i], a[i], gamma, z[i]) for i in range(r.size)]
    terms = {k: float(sum(s[k] for s in steps)) for k in ("surrogate", "occupancy", "estimation")}
    return StageCertificate(float(sum(s["lower_bound"] for s in steps)), terms, steps)


def stale_stage_bound(stale_surrogates, radii, a_max, gamma: float, zetas=None) -> StageCertificate:
    """Lower bound for updates evaluated on stage-start data.

    Step i pays sqrt(delta_i) + sum_{k<i} sqrt(delta_k), so the stage penalty is
    the fresh penalty plus the accumulated stale drift.
    """
    r = _check_radii(radii)
    L = np.asarray(stale_surrogates, float)
    a = np.broadcast_to(np.asarray(a_max, float), r.shape)
    z = np.zeros_like(r) if zetas is None else np.asarray(zetas, float)
    c = SQRT2 * gamma / (1 - gamma) ** 2
    sq = np.sqrt(r)
    steps = []
    for i in range(r.size):
        pen = c * a[i] * (sq[i] + sq[:i].sum())
        bias = z[i] / (1 - gamma)
        steps.append({"surrogate": L[i], "occupancy": pen, "estimation": bias, "lower_bound": L[i] - pen - bias})
    terms = {k: float(sum(s[k] for s in steps)) for k in ("surrogate", "occupancy", "estimation")}
    return StageCertificate(float(sum(s["lower_bound"] for s in steps)), terms, steps)


def penalty_sums(n: int, delta_bar: float = 1.0) -> tuple[float, float]:
    """(fresh, stale) occupancy penalty sums in units of sqrt(2) g A_max/(1-g)^2 at equal radii."""
    if n < 1:
        raise DomainError("team size must be positive")
    s = np.sqrt(delta_bar)
    return n * s, s * n * (n + 1) / 2


def oracle_bound(kl_max_forward: float, a_max: float, gamma: float) -> float:
    """Upper bound on J(new)-J(old) from the worst-state KL(new || old)."""
    if kl_max_forward < 0:
        raise DomainError("KL must be non-negative")
    return a_max / (1 - gamma) * np.sqrt(2 * kl_max_forward)


dv_oracle_upper = oracle_bound


def ratio_tv_identity(p, q):
    """(E_q |1 - p/q|, 2 TV(p, q)) for categoricals; p must vanish wherever q does."""
    p, q = np.asarray(p, float), np.asarray(q, float)
    if p.shape != q.shape:
        raise ValidationError("distributions over different supports")
    if np.any((q <= 0) & (p > 0)):
        raise DomainError("p is not absolutely continuous with respect to q")
    live = q > 0
    return float(q[live] @ np.abs(1 - p[live] / q[live])), float(np.sum(np.abs(p - q)))


def ratio_clip_bias_bound(delta: float, a_clip: float, gamma: float) -> float:
    """Surrogate bias from clipping the likelihood ratio, at token KL radius delta."""
    if delta < 0:
        raise DomainError("radius must be non-negative")
    return a_clip / (1 - gamma) * np.sqrt(2 * delta)


def hoeffding_half_width(n_groups: int, a_clip: float, ppo_eps: float, gamma: float, conf: float,
                         n_union: int = 1) -> float:
    if n_groups < 1:
        raise EstimationError("need at least one group")
    B = (1 + ppo_eps) * a_clip / (1 - gamma)
    return B * np.sqrt(2 * np.log(2 * n_union / conf) / n_groups)


def confidence_corrected(surrogate_hat: float, n_groups: int, delta: float, cfg: CertificateConfig,
                         n_union: int = 1) -> dict:
    """High-probability lower estimate of the unclipped sequential surrogate."""
    hw = hoeffding_half_width(n_groups, cfg.a_clip, cfg.ppo_eps, cfg.gamma, cfg.confidence_delta, n_union)
    bias = ratio_clip_bias_bound(delta, cfg.a_clip, cfg.gamma)
    return {"estimate": surrogate_hat, "sampling": hw, "ratio_bias": bias, "lower": surrogate_hat - hw - bias}


def hoeffding_tail(m: int, eps: float, B: float) -> float:
    """Two-sided Hoeffding tail for the mean of m i.i.d. samples in [-B, B]."""
    return 2 * np.exp(-m * eps**2 / (2 * B**2))


def block_concentration(n: int, block_len: int, beta_mix: float, eps: float, B: float) -> float:
    """Blocking bound for beta-mixing samples: 2 exp(-m eps^2 / 2B^2) + 2 (m - 1) beta, m = floor(N / 2l)."""
    if block_len < 1 or n < 1:
        raise DomainError("block length and sample count must be positive")
    m = n // (2 * block_len)
    if m < 1:
        raise EstimationError("fewer samples than one block pair")
    if beta_mix < 0:
        raise DomainError("mixing coefficient must be non-negative")
    return hoeffding_tail(m, eps, B) + 2 * (m - 1) * beta_mix


def lin_quad_optimum(g, F, delta: float):
    """Maximize g'D subject to D'FD/2 <= delta; returns (D*, value)."""
    g = np.asarray(g, float)
    F = np.asarray(F, float)
    if delta < 0:
        raise DomainError("radius must be non-negative")
    try:
        Fg = np.linalg.solve(F, g)
    except np.linalg.LinAlgError as exc:
        raise DomainError("Fisher matrix is singular") from exc
    q = float(g @ Fg)
    if q <= 0:
        raise DomainError("Fisher matrix must be positive definite on the gradient direction")
    step = np.sqrt(2 * delta / q) * Fg
    return step, float(np.sqrt(2 * delta * q))


def budget_lower_bound(radii, kappa, a_coef, c_occ, zetas, sampling, ratio_bias, gamma: float) -> float:
    """Stage bound as a function of the per-step radii under a linear-quadratic local model."""
    r = _check_radii(radii)
    sq = np.sqrt(r)
    k = np.broadcast_to(np.asarray(kappa, float), r.shape)
    a = np.broadcast_to(np.asarray(a_coef, float), r.shape)
    gain = float(np.sum(k * sq - a * r))
    return gain - c_occ * float(sq.sum()) - float(np.sum(zetas)) / (1 - gamma) - float(np.sum(sampling)) - float(ratio_bias)


def kl_allocation(budget: float, n: int, gains=None) -> dict:
    """Split a total KL budget over n steps: equal split and a gain-weighted split.

    The gain-weighted split maximizes sum g_i sqrt(delta_i) under sum delta_i =
    budget, giving delta_i proportional to g_i^2.
    """
    if budget <= 0 or n < 1:
        raise DomainError("budget and step count must be positive")
    equal = np.full(n, budget / n)
    out = {"equal": equal, "equal_penalty": float(np.sum(np.sqrt(equal))), "cap": float(np.sqrt(n * budget))}
    if gains is not None:
        g2 = np.asarray(gains, float) ** 2
        if g2.size != n:
            raise ValidationError("one gain per step")
        w = g2 / g2.sum() if g2.sum() > 0 else np.full(n, 1.0 / n)
        out["weighted"] = budget * w
        out["weighted_penalty"] = float(np.sum(np.sqrt(out["weighted"])))
    assert out["equal_penalty"] <= out["cap"] + 1e-12
    return out


def klfisher_quadratic_check(logits, perturb) -> dict:
    """Exact KL(softmax(theta + D) || softmax(theta)) vs the Fisher model D'F D / 2."""
    from scipy.special import log_softmax

    theta = np.asarray(logits, float)
    D = np.asarray(perturb, float)
    lp, lq = log_softmax(theta + D), log_softmax(theta)
    kl = float(np.exp(lp) @ (lp - lq))
    p = np.exp(lq)
    F = np.diag(p) - np.outer(p, p)
    quad = 0.5 * float(D @ F @ D)
    norm = float(np.linalg.norm(D))
    resid = kl - quad
    return {"kl": kl, "quad": quad, "residual": resid, "ratio": resid / norm**3 if norm > 0 else 0.0}


def allocation_bound(radii) -> tuple[float, float]:
    """(sum sqrt(delta_i), sqrt(n * sum delta_i))."""
    r = _check_radii(radii)
    return float(np.sum(np.sqrt(r))), float(np.sqrt(r.size * r.sum()))


def stage_certificate(logs, cfg: CertificateConfig, mode: str = "teamtr", zeta=None) -> StageCertificate:
    """Exact-input stage certificate from one stage of update logs.

    Radii are the realized exact step KLs; surrogates use the exact advantage,
    so the estimation term is zero unless ``zeta`` supplies per-step values.
    """
    radii = [max(l.kl_exact, 0.0) for l in logs]
    a_max = [l.a_max for l in logs]
    if mode in ("stale", "stale-is"):
        cert = stale_stage_bound([l.l_stale_exact for l in logs], radii, a_max, cfg.gamma, zeta)
    else:
        cert = stage_bound([l.l_seq_exact for l in logs], radii, a_max, cfg.gamma, zeta)
    cert.realized = logs[-1].j_after - logs[0].j_before
    cert.violation = cert.realized < cert.lower_bound - 1e-10
    return cert


def sampled_stage_certificate(logs, cfg: CertificateConfig) -> StageCertificate:
    """Certificate from batch quantities only: surrogate estimates, monitors and zeta proxies."""
    n = len(logs)
    per = []
    total = 0.0
    for l in logs:
        d = max(l.kl_monitor, 0.0)
        cc = confidence_corrected(l.l_hat, l.n_groups, d, cfg, n_union=n)
        step = single_step_bound(cc["lower"], d, cfg.a_max, cfg.gamma, l.zeta_clip + l.zeta_ratio + l.zeta_norm)
        step.update(sampling=cc["sampling"], ratio_bias=cc["ratio_bias"])
        per.append(step)
        total += step["lower_bound"]
    terms = {k: float(sum(s[k] for s in per)) for k in ("occupancy", "estimation", "sampling", "ratio_bias")}
    cert = StageCertificate(total, terms, per)
    cert.realized = logs[-1].j_after - logs[0].j_before
    cert.violation = cert.realized < cert.lower_bound
    return cert
