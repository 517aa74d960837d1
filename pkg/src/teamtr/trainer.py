"""Sequential per-agent trust-region updates and the baseline schedules."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax

from . import rng as rngmod
from .advantage import AdvantageConfig, batch_advantages, collect_rollouts, sample_prompts, zeta_proxy
from .divergence import factor_kl_tok, monitor_record, team_state_kl
from .errors import ConfigError, NumericalError, ValidationError
from .exact import exact_occupancy, exact_surrogate, exact_values, tv_distance
from .policy import LOGIT_CLAMP, AgentPolicy, TeamPolicy, replace_factor

MODES = ("teamtr", "stale", "stale-is", "resample-k", "joint", "kl-penalty-only", "no-trust-region")
ORDERS = ("fixed", "reverse", "random")


@dataclass(frozen=True)
class PpoConfig:
    ppo_eps: float = 0.2
    lr: float = 0.5
    max_inner_steps: int = 60
    beta_init: float = 0.0
    beta_up: float = 2.0
    beta_down: float = 0.5
    band_low: float = 0.5
    beta_floor: float = 1e-3

    def __post_init__(self):
        if not 0 < self.ppo_eps < 1:
            raise ConfigError("ppo_eps must lie in (0, 1)")
        if self.lr < 0 or self.max_inner_steps < 1:
            raise ConfigError("lr must be non-negative and max_inner_steps positive")
        if not 0 < self.band_low < 1:
            raise ConfigError("band_low must lie in (0, 1)")


@dataclass(frozen=True)
class TrustRegionSchedule:
    mode: str = "fixed"  # fixed | adaptive-target
    radius: float = 0.02
    radii: tuple = ()
    target: float = 0.02

    def __post_init__(self):
        if self.mode not in ("fixed", "adaptive-target"):
            raise ConfigError(f"unknown schedule mode {self.mode!r}")
        if self.radius < 0 or any(r < 0 for r in self.radii):
            raise ConfigError("trust-region radii must be non-negative")

    def radius_for(self, i: int) -> float:
        return float(self.radii[i - 1]) if self.radii else float(self.radius)


@dataclass(frozen=True)
class StagePlan:
    mode: str = "teamtr"
    order: str = "fixed"
    resample_every: int = 1
    n_prompts: int = 16
    schedule: TrustRegionSchedule = field(default_factory=TrustRegionSchedule)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.order not in ORDERS:
            raise ConfigError(f"unknown order {self.order!r}")
        if self.resample_every < 1:
            raise ConfigError("resample_every must be >= 1")
        if self.n_prompts < 1:
            raise ConfigError("n_prompts must be positive")


@dataclass
class UpdateInfo:
    kl_monitor: float
    kl_monitor_se: float
    beta: float
    inner_steps: int
    accepted: bool
    in_region: bool
    objective: float


class _AgentData:
    """Surrogate inputs for one agent's messages in a batch."""

    def __init__(self, batch, agent: int, step_adv, space, weights=None):
        sel = np.flatnonzero(batch.step_agent == agent)
        self.sel = sel
        m = batch.step_msg[sel]
        self.rows = batch.step_state[sel][:, None] * space.n_prefix + space.msg_prefix[m]
        self.toks = space.msg_tokens[m]
        self.mask = space.msg_mask[m]
        self.logp_beh = batch.step_logp[sel]
        self.adv = np.asarray(step_adv, float)[sel]
        self.traj = batch.step_traj[sel]
        self.t = batch.step_t[sel]
        w = np.ones(sel.size) if weights is None else np.asarray(weights, float)[self.traj]
        self.w = w / w.sum() if sel.size else w
        self.vocab = space.vocab_size

    @property
    def size(self) -> int:
        return self.sel.size

    def logp(self, logits):
        lsm = log_softmax(logits[self.rows], axis=-1)
        lp = np.take_along_axis(lsm, self.toks[..., None], axis=-1)[..., 0]
        return np.where(self.mask, lp, 0.0).sum(axis=1), lsm

    def monitor(self, logits) -> float:
        lp, _ = self.logp(logits)
        return float(self.w @ (self.logp_beh - lp))


def likelihood_ratio(logp_new, logp_old):
    return np.exp(np.asarray(logp_new) - np.asarray(logp_old))


def ppo_objective(data: _AgentData, logits, eps: float, beta: float, with_grad: bool = True):
    """Clipped surrogate minus beta times the sampled KL monitor, and its logit gradient."""
    lp, lsm = data.logp(logits)
    ratio = np.exp(lp - data.logp_beh)
    unclipped = ratio * data.adv
    clipped = np.clip(ratio, 1 - eps, 1 + eps) * data.adv
    active = unclipped <= clipped
    kl = float(data.w @ (data.logp_beh - lp))
    obj = float(data.w @ np.minimum(unclipped, clipped)) - beta * kl
    if not with_grad:
        return obj, None
    coef = data.w * (np.where(active, unclipped, 0.0) + beta)
    probs = np.exp(lsm)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, data.toks[..., None], 1.0, axis=-1)
    contrib = (onehot - probs) * (coef[:, None, None] * data.mask[..., None])
    grad = np.zeros_like(logits)
    np.add.at(grad, data.rows, contrib)
    return obj, grad


def update_agent(team: TeamPolicy, j: int, batch, step_adv, delta: float, cfg: PpoConfig,
                 weights=None, enforce: bool = True, beta: float | None = None):
    """Gradient ascent on agent j's logits under the adaptive-KL trust region.

    beta doubles when the monitor exceeds delta and halves below band_low *
    delta; the loop stops once the monitor falls inside the band. If the final
    monitor is outside the region and ``enforce`` is set, the behavior policy
    is returned and the update is flagged as rejected.
    """
    behavior = team.agents[j]
    data = _AgentData(batch, j, step_adv, team.space, weights)
    if data.size == 0:
        return behavior, UpdateInfo(0.0, 0.0, cfg.beta_init, 0, False, True, 0.0)
    theta = behavior.logits.copy()
    beta = cfg.beta_init if beta is None else beta
    kl = 0.0
    obj = 0.0
    steps = 0
    for steps in range(1, cfg.max_inner_steps + 1):
        obj, grad = ppo_objective(data, theta, cfg.ppo_eps, beta)
        theta = np.clip(theta + cfg.lr * grad, -LOGIT_CLAMP, LOGIT_CLAMP)
        kl = data.monitor(theta)
        if not np.isfinite(kl):
            raise NumericalError("monitored KL became non-finite")
        if kl > delta:
            beta = max(beta, cfg.beta_floor) * cfg.beta_up
        elif kl < cfg.band_low * delta:
            beta = beta * cfg.beta_down
        elif enforce:
            break
    lp, _ = data.logp(theta)
    lr = data.logp_beh - lp
    se = float(np.sqrt(data.w @ (lr - kl) ** 2 / max(data.size - 1, 1)))
    in_region = kl <= delta
    accepted = in_region or not enforce
    if not accepted:
        return behavior, UpdateInfo(kl, se, beta, steps, False, False, obj)
    return behavior.with_logits(theta), UpdateInfo(kl, se, beta, steps, True, in_region, obj)


def importance_weights(batch, base: TeamPolicy, current: TeamPolicy, updated) -> np.ndarray:
    """Per-trajectory product of current/base message ratios over already-updated agents."""
    log_w = np.zeros(batch.n_traj)
    for k in updated:
        sel = batch.step_agent == k
        lp_cur = current.agents[k].message_logprobs()[batch.step_state[sel], batch.step_msg[sel]]
        lp_base = base.agents[k].message_logprobs()[batch.step_state[sel], batch.step_msg[sel]]
        np.add.at(log_w, batch.step_traj[sel], lp_cur - lp_base)
    return np.exp(log_w)


def ess_fraction(w) -> float:
    w = np.asarray(w, float)
    return float(w.sum() ** 2 / (w.size * np.sum(w**2)))


def empirical_surrogate(batch, step_adv, new_agent: AgentPolicy, eps: float, weights=None) -> tuple[float, int]:
    """Group-averaged discounted clipped surrogate for agent j and the number of groups.

    Each group contributes (1/G) sum_traj sum_{t: agent j} g^t clip(w) A, which
    lies in [-B, B] with B = (1 + eps) A_clip / (1 - g).
    """
    sp = new_agent.space
    j = new_agent.agent_id
    sel = batch.step_agent == j
    s, m = batch.step_state[sel], batch.step_msg[sel]
    ratio = np.exp(new_agent.message_logprobs()[s, m] - batch.step_logp[sel])
    contrib = np.clip(ratio, 1 - eps, 1 + eps) * np.asarray(step_adv)[sel] * batch.gamma ** batch.step_t[sel]
    per_traj = np.zeros(batch.n_traj)
    np.add.at(per_traj, batch.step_traj[sel], contrib)
    if weights is not None:
        per_traj = per_traj * np.asarray(weights) / np.mean(weights)
    per_group = per_traj.reshape(-1, batch.group_size).mean(axis=1)
    return float(per_group.mean()), int(per_group.size)


def agent_order(n: int, plan: StagePlan, rng) -> list[int]:
    if plan.order == "fixed":
        return list(range(n))
    if plan.order == "reverse":
        return list(range(n))[::-1]
    return [int(x) for x in rng.permutation(n)]


@dataclass
class UpdateLog:
    stage: int
    step: int
    agent: int
    mode: str
    delta: float
    accepted: bool
    in_region: bool
    inner_steps: int
    beta: float
    kl_monitor: float
    kl_monitor_se: float
    kl_exact: float  # team token KL under the pre-update occupancy
    kl_factor_exact: float
    kl_max_forward: float  # max over states of KL(new || old)
    j_before: float
    j_after: float
    a_max: float
    l_seq_exact: float
    l_stale_exact: float
    gap_exact: float
    gap_data_exact: float
    tv_step: float
    tv_stale: float
    tv_data: float
    l_hat: float
    l_hat_seq: float
    l_hat_stale: float
    gap_hat: float
    n_groups: int
    zeta_clip: float
    zeta_ratio: float
    zeta_norm: float
    ess: float
    n_updated_before: int

    def as_dict(self):
        return asdict(self)


@dataclass
class StageResult:
    team: TeamPolicy
    logs: list
    j_start: float
    j_end: float


def _prep(batch, team, j, adv_cfg):
    vt = exact_values(team) if adv_cfg.baseline_mode == "oracle" else None
    step_adv, traj_adv, traj_raw = batch_advantages(batch, adv_cfg, vt)
    return step_adv, traj_adv, traj_raw


def run_stage(team: TeamPolicy, plan: StagePlan, adv_cfg: AdvantageConfig, ppo: PpoConfig, seed: int,
              stage: int, exact_logging: bool = True, records: list | None = None) -> StageResult:
    """One outer stage: every agent updated once according to ``plan.mode``."""
    if plan.mode == "joint":
        return run_stage_joint(team, plan, adv_cfg, ppo, seed, stage)
    sp = team.space
    n = team.n_agents
    g = sp.gamma
    order = agent_order(n, plan, rngmod.stream(seed, "order", stage))
    pi0 = team
    cur = team
    vals0 = exact_values(pi0)
    d0 = exact_occupancy(pi0).dist
    j_start = float(sp.mu @ vals0.v)
    logs = []
    stale_batch = None
    data_batch = None
    data_team = None
    enforce = plan.mode not in ("kl-penalty-only",)
    updated: list[int] = []
    for i, j in enumerate(order, start=1):
        delta = plan.schedule.radius_for(i)
        if plan.mode == "no-trust-region":
            delta = np.inf
        r = rngmod.stream(seed, "rollout", stage, i)
        prompts = sample_prompts(cur, plan.n_prompts, r)
        fresh = collect_rollouts(cur, prompts, adv_cfg.group_size, r)
        if i == 1:
            stale_batch = fresh
        weights = None
        if plan.mode in ("stale", "stale-is"):
            data_batch, data_team = stale_batch, pi0
            if plan.mode == "stale-is":
                weights = importance_weights(stale_batch, pi0, cur, updated)
        elif plan.mode == "resample-k":
            if (i - 1) % plan.resample_every == 0:
                data_batch, data_team = fresh, cur
        else:
            data_batch, data_team = fresh, cur
        step_adv, traj_adv, traj_raw = _prep(data_batch, data_team, j, adv_cfg)
        kw = {"beta": 0.0} if plan.mode == "no-trust-region" else {}
        new_agent, info = update_agent(cur, j, data_batch, step_adv, delta, ppo, weights, enforce, **kw)
        nxt = replace_factor(cur, j, new_agent)
        if records is not None:
            records.append(monitor_record(data_batch, cur.agents[j], new_agent))

        ratios = np.exp(new_agent.message_logprobs()[data_batch.step_state, data_batch.step_msg]
                        - data_batch.step_logp)[data_batch.step_agent == j]
        if traj_adv is not None and adv_cfg.group_size >= 4:
            z = zeta_proxy(data_batch, traj_adv, traj_raw, ratios, adv_cfg, ppo.ppo_eps, j)
        else:
            z = {"clip": 0.0, "ratio": 0.0, "norm": 0.0}
        l_hat, n_groups = empirical_surrogate(data_batch, step_adv, new_agent, ppo.ppo_eps, weights)
        fa, _, _ = _prep(fresh, cur, j, adv_cfg)
        l_hat_seq, _ = empirical_surrogate(fresh, fa, new_agent, ppo.ppo_eps)
        sa, _, _ = _prep(stale_batch, pi0, j, adv_cfg)
        l_hat_stale, _ = empirical_surrogate(stale_batch, sa, new_agent, ppo.ppo_eps)
        ess = ess_fraction(weights) if weights is not None else 1.0

        if exact_logging:
            rec = _exact_record(cur, nxt, pi0, d0, data_team, j)
        else:
            rec = _EMPTY_EXACT
        logs.append(UpdateLog(
            stage=stage, step=i, agent=j, mode=plan.mode, delta=float(delta), accepted=info.accepted,
            in_region=info.in_region, inner_steps=info.inner_steps, beta=info.beta,
            kl_monitor=info.kl_monitor, kl_monitor_se=info.kl_monitor_se, **rec,
            l_hat=l_hat, l_hat_seq=l_hat_seq, l_hat_stale=l_hat_stale, gap_hat=abs(l_hat_seq - l_hat_stale),
            n_groups=n_groups, zeta_clip=z["clip"], zeta_ratio=z["ratio"], zeta_norm=z["norm"], ess=ess,
            n_updated_before=len(updated),
        ))
        updated.append(j)
        cur = nxt
    j_end = logs[-1].j_after if exact_logging else float("nan")
    return StageResult(cur, logs, j_start, j_end)


_EMPTY_EXACT = {k: float("nan") for k in (
    "kl_exact", "kl_factor_exact", "kl_max_forward", "j_before", "j_after", "a_max", "l_seq_exact",
    "l_stale_exact", "gap_exact", "gap_data_exact", "tv_step", "tv_stale", "tv_data")}


def _exact_record(cur: TeamPolicy, nxt: TeamPolicy, pi0: TeamPolicy, d0, data_team: TeamPolicy, j: int):
    sp = cur.space
    vt = exact_values(cur)
    d_cur = exact_occupancy(cur).dist
    d_nxt = exact_occupancy(nxt).dist
    d_data = exact_occupancy(data_team).dist
    kl_states = team_state_kl(cur, nxt)
    fwd = team_state_kl(nxt, cur)
    l_seq = exact_surrogate(d_cur, nxt, vt.adv)
    l_stale = exact_surrogate(d0, nxt, vt.adv)
    l_data = exact_surrogate(d_data, nxt, vt.adv)
    l_post = exact_surrogate(d_nxt, nxt, vt.adv)
    return dict(
        kl_exact=float(d_cur @ kl_states),
        kl_factor_exact=factor_kl_tok(cur, cur.agents[j], nxt.agents[j], d_cur),
        kl_max_forward=float(fwd.max()),
        j_before=float(sp.mu @ vt.v),
        j_after=float(sp.mu @ exact_values(nxt).v),
        a_max=vt.a_max,
        l_seq_exact=l_seq,
        l_stale_exact=l_stale,
        gap_exact=abs(l_seq - l_stale),
        gap_data_exact=abs(l_post - l_data),
        tv_step=tv_distance(d_nxt, d_cur),
        tv_stale=tv_distance(d_cur, d0),
        tv_data=tv_distance(d_nxt, d_data),
    )


def run_stage_joint(team: TeamPolicy, plan: StagePlan, adv_cfg: AdvantageConfig, ppo: PpoConfig, seed: int,
                    stage: int) -> StageResult:
    """All agents updated simultaneously from one batch under the stage-start team."""
    sp = team.space
    r = rngmod.stream(seed, "rollout", stage, 1)
    batch = collect_rollouts(team, sample_prompts(team, plan.n_prompts, r), adv_cfg.group_size, r)
    step_adv, traj_adv, traj_raw = _prep(batch, team, 0, adv_cfg)
    new_agents, infos = [], []
    for j in range(team.n_agents):
        a, info = update_agent(team, j, batch, step_adv, plan.schedule.radius_for(j + 1), ppo)
        new_agents.append(a)
        infos.append(info)
    nxt = TeamPolicy(new_agents, sp)
    d0 = exact_occupancy(team).dist
    vt = exact_values(team)
    kl_team = float(d0 @ team_state_kl(team, nxt))
    j_start = float(sp.mu @ vt.v)
    j_end = float(sp.mu @ exact_values(nxt).v)
    logs = []
    for j, info in enumerate(infos):
        rec = _exact_record(team, replace_factor(team, j, new_agents[j]), team, d0, team, j)
        rec["kl_exact"] = kl_team
        rec["j_after"] = j_end
        l_hat, n_groups = empirical_surrogate(batch, step_adv, new_agents[j], ppo.ppo_eps)
        logs.append(UpdateLog(
            stage=stage, step=j + 1, agent=j, mode="joint", delta=plan.schedule.radius_for(j + 1),
            accepted=info.accepted, in_region=info.in_region, inner_steps=info.inner_steps, beta=info.beta,
            kl_monitor=info.kl_monitor, kl_monitor_se=info.kl_monitor_se, **rec, l_hat=l_hat,
            l_hat_seq=l_hat, l_hat_stale=l_hat, gap_hat=0.0, n_groups=n_groups, zeta_clip=0.0,
            zeta_ratio=0.0, zeta_norm=0.0, ess=1.0, n_updated_before=0))
    return StageResult(nxt, logs, j_start, j_end)


def train(team: TeamPolicy, plan: StagePlan, adv_cfg: AdvantageConfig, ppo: PpoConfig, seed: int,
          n_stages: int, exact_logging: bool = True, callback=None, records: list | None = None,
          first_stage: int = 1):
    """Run ``n_stages`` outer stages; returns (final team, update logs, per-stage end returns)."""
    logs, returns = [], []
    for k in range(first_stage, first_stage + n_stages):
        res = run_stage(team, plan, adv_cfg, ppo, seed, k, exact_logging, records)
        team = res.team
        logs.extend(res.logs)
        returns.append(res.j_end)
        if callback is not None:
            callback(k, res)
    return team, logs, returns


# smoothness constants and projected gradient ascent


def score_bounds(team: TeamPolicy) -> tuple[float, float]:
    """(B1, B2): max score norm and max Hessian operator norm of log pi over reachable decisions."""
    sp = team.space
    b1, b2 = 0.0, 0.0
    for j, agent in enumerate(team.agents):
        idx = np.flatnonzero(sp.active == j)
        if idx.size == 0:
            continue
        probs = softmax(agent.logits, axis=1)
        for s in idx:
            rows = s * sp.n_prefix + sp.msg_prefix
            for m in range(sp.n_messages):
                L = sp.msg_len[m]
                sq = 0.0
                for u in range(L):
                    p = probs[rows[m, u]]
                    e = -p.copy()
                    e[sp.msg_tokens[m, u]] += 1.0
                    sq += float(e @ e)
                    fisher = np.diag(p) - np.outer(p, p)
                    b2 = max(b2, float(np.linalg.eigvalsh(fisher)[-1]))
                b1 = max(b1, np.sqrt(sq))
    return float(b1), float(b2)


def smoothness_constant(n_agents: int, a_clip: float, gamma: float, b1: float, b2: float) -> float:
    return n_agents * a_clip / (1.0 - gamma) * (b2 + b1**2)


def project_ball(theta, center, radius: float):
    diff = np.asarray(theta) - np.asarray(center)
    norm = np.linalg.norm(diff)
    if norm <= radius:
        return np.asarray(theta, float)
    return np.asarray(center) + diff * (radius / norm)


def pga_step(theta, grad_fn, eta: float, center, radius: float):
    """Projected gradient ascent step; returns (theta_next, gradient mapping)."""
    theta = np.asarray(theta, float)
    nxt = project_ball(theta + eta * grad_fn(theta), center, radius)
    return nxt, (nxt - theta) / eta


def check_mode(mode: str):
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}")
