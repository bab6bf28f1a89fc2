"""Model-based push planning over the PBD world.

A push is a straight pusher stroke from a polar start point around the
object to a Cartesian end point, both relative to the object's planar
center. Candidate pushes are rolled out on a cloned world and scored by a
five-term reward; a two-component Gaussian mixture is refit to the best
samples of each generation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .math3d import wrap_angle, yaw_of
from .pbd import SimConfig, World, step

TERM_NAMES = ("position", "yaw", "proximity", "radius_prior", "final_prior")


@dataclass(frozen=True)
class PushAction:
    """Start point in polar coordinates, end point as a planar offset, both about the object center."""

    start_radius: float
    start_angle: float
    end_dx: float
    end_dy: float

    def __post_init__(self):
        if not self.start_radius > 0:
            raise ValueError(f"start_radius must be positive, got {self.start_radius}")
        object.__setattr__(self, "start_angle", float(wrap_angle(self.start_angle)))

    def as_array(self) -> np.ndarray:
        return np.array([self.start_radius, self.start_angle, self.end_dx, self.end_dy])

    @classmethod
    def from_array(cls, a) -> "PushAction":
        a = np.asarray(a, float)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def start_point(self, center) -> np.ndarray:
        return np.asarray(center, float)[:2] + self.start_radius * np.array(
            [math.cos(self.start_angle), math.sin(self.start_angle)])

    def end_point(self, center) -> np.ndarray:
        return np.asarray(center, float)[:2] + np.array([self.end_dx, self.end_dy])


@dataclass
class RewardParams:
    """Weights of the five reward terms.

    Attributes
    ----------
    w_pos : float
        Weight on squared planar position error (m^-2).
    w_yaw : float
        Weight on absolute yaw error (rad^-1).
    w_prox, prox_threshold : float
        Quadratic penalty on starting closer than ``prox_threshold``.
    radius_mean, radius_std : float
        Gaussian prior on the start radius.
    final_std : float
        Zero-mean isotropic Gaussian prior on the end offset.
    """

    w_pos: float = 1.0e4
    w_yaw: float = 100.0
    w_prox: float = 200.0
    prox_threshold: float = 0.08
    radius_mean: float = 0.15
    radius_std: float = 0.03
    final_std: float = 0.05

    def __post_init__(self):
        problems = [n for n in ("w_pos", "w_yaw", "w_prox", "prox_threshold") if getattr(self, n) < 0]
        problems += [n for n in ("radius_std", "final_std") if not getattr(self, n) > 0]
        if problems:
            raise ValueError(f"invalid reward parameters: {', '.join(problems)}")


@dataclass
class GoalPose:
    position: np.ndarray
    yaw: float

    def __post_init__(self):
        self.position = np.asarray(self.position, float).reshape(2)
        self.yaw = float(self.yaw)


@dataclass
class PushExecution:
    """How a push is scripted: pusher speed (m/s), settling time (s), height (m) and sim settings.

    ``height=None`` pushes at the object's center-of-mass height.
    """

    speed: float = 0.05
    settle: float = 0.5
    height: float | None = None
    config: SimConfig = field(default_factory=SimConfig)

    def __post_init__(self):
        if not self.speed > 0 or self.settle < 0:
            raise ValueError("push speed must be positive and settle time non-negative")


# --- world helpers ---------------------------------------------------------------------------


def find_actors(world: World) -> tuple[int, int]:
    """Indices of the single dynamic body and the single kinematic body."""
    dynamic = np.nonzero(world.body_inv_mass > 0)[0]
    kinematic = np.nonzero(world.body_inv_mass == 0)[0]
    if len(dynamic) != 1 or len(kinematic) != 1:
        raise ValueError(f"planning world needs one object and one pusher, found {len(dynamic)} dynamic "
                         f"and {len(kinematic)} kinematic bodies")
    return int(dynamic[0]), int(kinematic[0])


def pose_errors(world: World, goal: GoalPose, body: int | None = None) -> tuple[float, float]:
    """Planar position error (m) and absolute yaw error (rad) of the object."""
    body = find_actors(world)[0] if body is None else body
    pos = float(np.linalg.norm(world.body_x[body, :2] - goal.position))
    yaw = float(abs(wrap_angle(yaw_of(world.body_q[body]) - goal.yaw)))
    return pos, yaw


def execute_push(world: World, action: PushAction, execution: PushExecution | None = None) -> World:
    """Run one push on ``world`` in place and return it."""
    ex = execution or PushExecution()
    obj, pusher = find_actors(world)
    center = world.body_x[obj].copy()
    start = action.start_point(center)
    end = action.end_point(center)
    z = center[2] if ex.height is None else ex.height
    world.teleport_kinematic(pusher, [start[0], start[1], z])
    world.body_v[pusher] = 0.0
    world.body_w[pusher] = 0.0
    dt = ex.config.dt
    length = float(np.linalg.norm(end - start))
    travel = length / ex.speed
    frames = math.ceil(travel / dt - 1e-9) if length > 0 else 0
    for k in range(1, frames + 1):
        s = min(1.0, k * dt / travel)
        p = start + s * (end - start)
        world.set_kinematic_target(pusher, [p[0], p[1], z])
        step(world, ex.config)
    for _ in range(math.ceil(ex.settle / dt - 1e-9)):
        step(world, ex.config)
    return world


# --- reward ---------------------------------------------------------------------------------


def _log_normal(x, mean, std, dim=1):
    x = np.atleast_1d(np.asarray(x, float) - mean)
    return float(-0.5 * np.dot(x, x) / std**2 - dim * math.log(std * math.sqrt(2.0 * math.pi)))


def reward_terms(position_error: float, yaw_error: float, action: PushAction, params: RewardParams) -> dict:
    """The five named reward terms; the reward is their sum."""
    return {
        "position": -params.w_pos * position_error**2,
        "yaw": -params.w_yaw * abs(yaw_error),
        "proximity": -params.w_prox * max(0.0, params.prox_threshold - action.start_radius) ** 2,
        "radius_prior": _log_normal(action.start_radius, params.radius_mean, params.radius_std),
        "final_prior": _log_normal([action.end_dx, action.end_dy], 0.0, params.final_std, dim=2),
    }


def error_cost(position_error: float, yaw_error: float, params: RewardParams) -> float:
    """Goal-error part of the reward, negated (zero at the goal)."""
    return params.w_pos * position_error**2 + params.w_yaw * abs(yaw_error)


def evaluate_push_terms(world: World, action: PushAction, goal: GoalPose, params: RewardParams,
                        execution: PushExecution | None = None) -> dict:
    """Roll ``action`` out on a clone of ``world`` and return the reward terms."""
    trial = execute_push(world.copy(), action, execution)
    pos, yaw = pose_errors(trial, goal)
    return reward_terms(pos, yaw, action, params)


def evaluate_push(world: World, action: PushAction, goal: GoalPose, params: RewardParams,
                  execution: PushExecution | None = None) -> float:
    """Scalar reward of ``action``; ``world`` is left untouched."""
    return float(sum(evaluate_push_terms(world, action, goal, params, execution).values()))


# --- mixture search ---------------------------------------------------------------------------


@dataclass
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, float)
        self.means = np.atleast_2d(np.asarray(self.means, float))
        self.covs = np.asarray(self.covs, float).reshape(len(self.means), self.means.shape[1], -1)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng: np.random.Generator):
        comp = rng.choice(len(self.weights), size=n, p=self.weights / self.weights.sum())
        out = np.empty((n, self.dim))
        for k in range(len(self.weights)):
            idx = np.nonzero(comp == k)[0]
            if len(idx):
                out[idx] = rng.multivariate_normal(self.means[k], self.covs[k], size=len(idx), method="cholesky")
        return out, comp

    def component_log_pdf(self, x) -> np.ndarray:
        """``log w_k + log N(x; m_k, C_k)`` with shape (n, K)."""
        x = np.atleast_2d(x)
        out = np.empty((len(x), len(self.weights)))
        for k in range(len(self.weights)):
            chol = np.linalg.cholesky(self.covs[k])
            z = np.linalg.solve(chol, (x - self.means[k]).T)
            logdet = 2.0 * np.sum(np.log(np.diag(chol)))
            out[:, k] = (math.log(max(self.weights[k], 1e-300)) - 0.5 * np.sum(z * z, axis=0)
                         - 0.5 * (logdet + self.dim * math.log(2.0 * math.pi)))
        return out

    def log_pdf(self, x) -> np.ndarray:
        c = self.component_log_pdf(x)
        m = c.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(c - m).sum(axis=1, keepdims=True))).ravel()


@dataclass
class SearchResult:
    best_x: np.ndarray
    best_value: float
    mixture: GaussianMixture
    evaluations: int
    history: list = field(default_factory=list)


def mixture_search(objective, mixture: GaussianMixture, budget: int, population: int = 32,
                   elite_fraction: float = 0.25, smoothing: float = 0.2, min_std=1e-3, lower=None, upper=None,
                   em_iterations: int = 20, keep_elite: bool = True,
                   rng: np.random.Generator | None = None) -> SearchResult:
    """Maximize ``objective`` by elite refitting of a Gaussian mixture.

    Each generation draws ``population`` samples and keeps the top
    ``elite_fraction`` of them, pooled with the previous elite when
    ``keep_elite`` is set. The mixture is refit to the elite by EM seeded
    with the current components. Covariances are taken about the previous
    means so the spread follows the direction of progress; weights and
    covariances are blended with the old ones by ``smoothing``. Samples are
    clipped to ``[lower, upper]`` before evaluation.
    """
    if population < 1 or budget < population:
        raise ValueError(f"budget ({budget}) must be at least the population size ({population})")
    rng = rng or np.random.default_rng(0)
    mix = GaussianMixture(mixture.weights.copy(), mixture.means.copy(), mixture.covs.copy())
    floor = np.diag(np.broadcast_to(np.asarray(min_std, float), (mix.dim,)) ** 2)
    best_x, best_v = None, -np.inf
    elite_x = elite_v = None
    used = 0
    history = []
    while used + population <= budget:
        x, _ = mix.sample(population, rng)
        if lower is not None or upper is not None:
            x = np.clip(x, lower, upper)
        v = np.array([objective(xi) for xi in x], float)
        used += population
        order = np.argsort(-v, kind="stable")
        if v[order[0]] > best_v:
            best_v, best_x = float(v[order[0]]), x[order[0]].copy()
        n_elite = max(len(mix.weights) * 2, int(math.ceil(elite_fraction * population)))
        if keep_elite and elite_x is not None:
            x, v = np.vstack([x, elite_x]), np.r_[v, elite_v]
            order = np.argsort(-v, kind="stable")
        elite_x, elite_v = x[order[:n_elite]], v[order[:n_elite]]
        mix = _refit(mix, elite_x, smoothing, floor, em_iterations)
        history.append(GaussianMixture(mix.weights.copy(), mix.means.copy(), mix.covs.copy()))
    return SearchResult(best_x, best_v, mix, used, history)


def _refit(mix: GaussianMixture, elite, smoothing, floor, iterations) -> GaussianMixture:
    w, mu, cov = mix.weights.copy(), mix.means.copy(), mix.covs.copy()
    for _ in range(iterations):
        logp = GaussianMixture(w, mu, cov).component_log_pdf(elite)
        logp -= logp.max(axis=1, keepdims=True)
        resp = np.exp(logp)
        resp /= resp.sum(axis=1, keepdims=True)
        nk = resp.sum(axis=0)
        for k in range(len(w)):
            if nk[k] < 1e-6:
                continue
            mu[k] = resp[:, k] @ elite / nk[k]
            # spread about the previous mean keeps the step size along the direction of progress
            d = elite - mix.means[k]
            cov[k] = (resp[:, k, None] * d).T @ d / nk[k] + floor
        w = np.maximum(nk / nk.sum(), 1e-3)
        w /= w.sum()
    a = smoothing
    # means move fully; weights and covariances are damped
    return GaussianMixture((1 - a) * w + a * mix.weights, mu, (1 - a) * cov + a * mix.covs)


# --- push optimization ------------------------------------------------------------------------

ACTION_LOWER = np.array([0.02, -2 * np.pi, -0.3, -0.3])
ACTION_UPPER = np.array([0.35, 2 * np.pi, 0.3, 0.3])
ACTION_MIN_STD = np.array([0.003, 0.02, 0.003, 0.003])


def initial_mixture(world: World, goal: GoalPose, params: RewardParams) -> GaussianMixture:
    """Two components behind the object as seen from the goal, rotated ±22.5° apart."""
    obj, _ = find_actors(world)
    center = world.body_x[obj, :2]
    delta = goal.position - center
    away = math.atan2(-delta[1], -delta[0]) if np.linalg.norm(delta) > 1e-9 else 0.0
    std = np.array([params.radius_std, np.pi / 6, params.final_std, params.final_std])
    means = np.array([[params.radius_mean, away + s * np.pi / 8, delta[0], delta[1]] for s in (-1.0, 1.0)])
    return GaussianMixture(np.full(2, 0.5), means, np.stack([np.diag(std**2)] * 2))


def optimize_push(world: World, goal: GoalPose, params: RewardParams | None = None, budget: int = 128,
                  population: int = 32, seed: int = 0, execution: PushExecution | None = None, reward_fn=None,
                  mixture: GaussianMixture | None = None) -> tuple[PushAction, float]:
    """Search the 4D action space for a high-reward push.

    ``reward_fn(action) -> float`` replaces the rollout reward when given.
    Returns the best evaluated action and its reward.
    """
    params = params or RewardParams()
    if reward_fn is None:
        def reward_fn(action):
            return evaluate_push(world, action, goal, params, execution)
    mix = mixture if mixture is not None else initial_mixture(world, goal, params)
    res = mixture_search(lambda a: reward_fn(PushAction.from_array(a)), mix, budget, population,
                         min_std=ACTION_MIN_STD, lower=ACTION_LOWER, upper=ACTION_UPPER,
                         rng=np.random.default_rng(seed))
    return PushAction.from_array(res.best_x), res.best_value


@dataclass
class PushRecord:
    index: int
    action: PushAction
    predicted_reward: float
    position_error: float
    yaw_error: float


@dataclass
class PlanResult:
    pushes: list
    initial_position_error: float
    initial_yaw_error: float
    final_position_error: float
    final_yaw_error: float

    @property
    def actions(self) -> list:
        return [p.action for p in self.pushes]


def plan_sequence(world: World, goal: GoalPose, params: RewardParams | None = None,
                  improvement_threshold: float = 1.0, max_pushes: int = 6, budget: int = 128, population: int = 32,
                  seed: int = 0, execution: PushExecution | None = None) -> PlanResult:
    """Greedy push sequence executed on ``world`` (mutated in place).

    A push is executed only if its rollout lowers the goal-error cost by
    more than ``improvement_threshold``.
    """
    params = params or RewardParams()
    ex = execution or PushExecution()
    obj, _ = find_actors(world)
    pos0, yaw0 = pose_errors(world, goal, obj)
    records = []
    while len(records) < max_pushes and np.isfinite(improvement_threshold):
        pos, yaw = pose_errors(world, goal, obj)
        current = error_cost(pos, yaw, params)
        if current <= improvement_threshold:
            break
        action, reward = optimize_push(world, goal, params, budget, population, seed + 1000 * len(records), ex)
        trial = execute_push(world.copy(), action, ex)
        if current - error_cost(*pose_errors(trial, goal, obj), params) <= improvement_threshold:
            break
        execute_push(world, action, ex)
        pos, yaw = pose_errors(world, goal, obj)
        records.append(PushRecord(len(records), action, reward, pos, yaw))
    pos, yaw = pose_errors(world, goal, obj)
    return PlanResult(records, pos0, yaw0, pos, yaw)


def random_goal(rng: np.random.Generator, center=(0.0, 0.0), radius: float = 0.1,
                yaw_range: float = np.pi / 3, yaw0: float = 0.0) -> GoalPose:
    """Goal uniformly inside a disk about ``center`` with yaw offset in ``±yaw_range``."""
    r = radius * math.sqrt(rng.uniform())
    a = rng.uniform(-np.pi, np.pi)
    return GoalPose(np.asarray(center, float) + r * np.array([math.cos(a), math.sin(a)]),
                    wrap_angle(yaw0 + rng.uniform(-yaw_range, yaw_range)))
