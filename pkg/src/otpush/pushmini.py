"""Deterministic two-domain 2D pushing benchmark.

A point agent pushes an axis-aligned square block to a square goal
region inside the unit square. The two domains differ in speed, contact
gain (the dynamics gap), and observation layout (the appearance gap);
mirrored variants flip which side of the block faces the goal, forcing a
distinct pushing motion (the behaviour gap). Everything is a pure
function of (domain, variant, seed), so datasets and rollouts are
byte-reproducible.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import ChunkedAction, NormStats, fit_norm_stats
from .numkit import ContractError, SeededRng

SIDE = 0.2
HALF = SIDE / 2.0
V_MAX = {"source": 0.04, "target": 0.02}
PUSH_GAIN = {"source": 1.0, "target": 0.7}
EPISODE_CAP = 200
SUCCESS_IOU = 0.9
EXPERT_STOP_IOU = 0.92
CHUNK_HORIZON = 16
EXECUTE_STEPS = 8  # receding horizon: execute half the predicted chunk
OBS_DIM = 10

DOMAINS = ("source", "target")
VARIANTS = ("base", "purple", "purple_mirrored", "white_mirrored")
_BG_CODE = {
    "base": (1.0, 0.0),
    "white_mirrored": (1.0, 0.0),
    "purple": (0.0, 1.0),
    "purple_mirrored": (0.0, 1.0),
}

_EXPERT_CLEARANCE = 0.03
_EXPERT_JITTER = 0.008
_EXPERT_LOOKAHEAD = 3.0  # targets lead the agent by this many speed steps
_HOLD_TAIL = 8

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class WorldState:
    agent: np.ndarray
    block_center: np.ndarray
    goal_center: np.ndarray
    variant: str
    domain: str
    step: int = 0


def _check_setting(domain: str, variant: str) -> None:
    if domain not in DOMAINS:
        raise ContractError(f"unknown domain {domain!r}")
    if variant not in VARIANTS:
        raise ContractError(f"unknown variant {variant!r}")


def episode_rng(domain: str, variant: str, seed: int) -> np.random.Generator:
    """The single RNG stream driving one episode's reset, noise, and jitter."""
    return SeededRng(seed).stream(f"episode/{domain}/{variant}")


def reset(domain: str, variant: str, rng: np.random.Generator) -> WorldState:
    """Sample a start state; mirrored variants flip the goal side."""
    _check_setting(domain, variant)
    mirrored = variant.endswith("_mirrored")
    block_y = rng.uniform(0.3, 0.7)
    goal_y = rng.uniform(0.3, 0.7)
    if mirrored:
        block_x = rng.uniform(0.60, 0.75)
        goal_x = rng.uniform(0.20, 0.35)
    else:
        block_x = rng.uniform(0.25, 0.40)
        goal_x = rng.uniform(0.65, 0.80)
    block = np.array([block_x, block_y])
    goal = np.array([goal_x, goal_y])
    agent = np.array([rng.uniform(0.1, 0.9), rng.uniform(0.05, 0.2)])
    while _inside_square(agent, block, HALF + 0.02):
        agent = np.array([rng.uniform(0.1, 0.9), rng.uniform(0.05, 0.2)])
    return WorldState(agent=agent, block_center=block, goal_center=goal,
                      variant=variant, domain=domain, step=0)


def _inside_square(point: np.ndarray, center: np.ndarray, half: float) -> bool:
    return bool(np.all(np.abs(point - center) < half))


def clip_target(agent_target: np.ndarray) -> tuple[np.ndarray, bool]:
    """Clamp a commanded target into the unit square; flag if it moved."""
    t = np.asarray(agent_target, dtype=np.float64).reshape(2)
    clipped = np.clip(t, 0.0, 1.0)
    return clipped, bool(np.any(clipped != t))


def step(state: WorldState, agent_target: np.ndarray) -> WorldState:
    """Advance one tick: agent moves toward its target, contact pushes the block.

    The agent covers at most the domain's per-step speed. If it ends up
    inside the block square, the block translates along the axis of least
    penetration, away from the agent, scaled by the domain's contact gain
    (the friction analog); the block is then clamped inside the arena.
    """
    target, _ = clip_target(agent_target)
    agent = _move_point(state.agent, target, V_MAX[state.domain])
    block = _resolve_push(agent, state.block_center, PUSH_GAIN[state.domain])
    block = np.clip(block, HALF, 1.0 - HALF)
    return WorldState(agent=agent, block_center=block, goal_center=state.goal_center,
                      variant=state.variant, domain=state.domain, step=state.step + 1)


def _move_point(pos: np.ndarray, target: np.ndarray, v_max: float) -> np.ndarray:
    delta = target - pos
    dist = float(np.hypot(delta[0], delta[1]))
    if dist <= v_max:
        return target.copy()
    return pos + delta * (v_max / dist)


def _resolve_push(agent: np.ndarray, block: np.ndarray, gain: float) -> np.ndarray:
    d = agent - block
    pen_x = HALF - abs(d[0])
    pen_y = HALF - abs(d[1])
    if pen_x <= 0.0 or pen_y <= 0.0:
        return block.copy()
    out = block.copy()
    if pen_x <= pen_y:
        direction = 1.0 if d[0] <= 0.0 else -1.0
        out[0] += gain * pen_x * direction
    else:
        direction = 1.0 if d[1] <= 0.0 else -1.0
        out[1] += gain * pen_y * direction
    return out


def reward(state: WorldState) -> float:
    """Intersection-over-union of the block and goal squares, in [0, 1]."""
    overlap_x = max(0.0, SIDE - abs(state.block_center[0] - state.goal_center[0]))
    overlap_y = max(0.0, SIDE - abs(state.block_center[1] - state.goal_center[1]))
    inter = overlap_x * overlap_y
    union = 2.0 * SIDE * SIDE - inter
    return inter / union


def observe(state: WorldState, rng: np.random.Generator) -> np.ndarray:
    """Emit the domain's observation layout; the trailing pair is fresh noise."""
    bg = _BG_CODE[state.variant]
    noise = rng.uniform(0.0, 1.0, size=2)
    if state.domain == "source":
        parts = (state.agent, state.block_center, state.goal_center, bg, noise)
    else:
        parts = (state.goal_center, state.agent, state.block_center, bg, noise)
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])


def decode_observation(obs: np.ndarray, domain: str) -> dict:
    """Recover the state fields from an observation under its own layout."""
    obs = np.asarray(obs, dtype=np.float64).reshape(OBS_DIM)
    if domain == "source":
        agent, block, goal = obs[0:2], obs[2:4], obs[4:6]
    elif domain == "target":
        goal, agent, block = obs[0:2], obs[2:4], obs[4:6]
    else:
        raise ContractError(f"unknown domain {domain!r}")
    return {"agent": agent, "block_center": block, "goal_center": goal, "bg": obs[6:8]}


# ---------------------------------------------------------------------------
# Scripted expert
# ---------------------------------------------------------------------------


_AXIS_TOL = 0.003
_MAX_DEPTH = 0.06


def scripted_expert(state: WorldState, rng: np.random.Generator | None = None) -> np.ndarray:
    """Two-phase push controller.

    Phase 1 walks to the approach point on the block's far side from the
    goal (routing around the block if the straight path would collide);
    phase 2 drives into the far face to push the block along the
    block-to-goal line, one axis at a time to match the axis-aligned
    contact resolution, easing off as the block closes in, until the
    overlap reaches the stop threshold. With an rng, a small bounded
    jitter is added. Mirrored variants flip the goal side at reset, which
    lands the approach point on the opposite face.
    """
    agent = state.agent
    block = state.block_center
    goal = state.goal_center
    if reward(state) >= EXPERT_STOP_IOU:
        target = agent.copy()
    else:
        gap = block - goal
        axis = _push_axis(gap)
        u = np.zeros(2)
        u[axis] = 1.0 if gap[axis] >= 0.0 else -1.0
        needed = abs(gap[axis])
        along = float(np.dot(agent - block, u))
        perp = agent - block - along * u
        on_face = abs(float(perp[axis ^ 1])) <= 0.03 and \
            (HALF - _MAX_DEPTH - 1e-9) <= along <= (HALF + _EXPERT_CLEARANCE + 0.02)
        if on_face:
            depth = min(_MAX_DEPTH, max(0.004, 0.95 * needed / PUSH_GAIN[state.domain]))
            target = block + u * (HALF - depth)
        else:
            approach = block + u * (HALF + _EXPERT_CLEARANCE)
            target = _navigate(agent, approach, block)
    # command a near-future point on the way to the waypoint instead of the
    # waypoint itself: the executed trajectory is unchanged (speed cap), but
    # the action labels become a smooth, bounded function of the state
    target = _move_point(agent, target, _EXPERT_LOOKAHEAD * V_MAX[state.domain])
    if rng is not None:
        target = target + rng.uniform(-_EXPERT_JITTER, _EXPERT_JITTER, size=2)
    return clip_target(target)[0]


def _push_axis(gap: np.ndarray) -> int:
    """Axis to push next: x until aligned, then y; keeps the plan stateless."""
    return 0 if abs(gap[0]) > _AXIS_TOL else 1


def _navigate(agent: np.ndarray, destination: np.ndarray, block: np.ndarray) -> np.ndarray:
    """Next waypoint toward the destination, routing around the block.

    Shortest path on the visibility graph over {agent, destination, four
    inflated block corners}; returns the first hop after the agent.
    """
    hit_half = HALF + 0.015
    if not _segment_hits_square(agent, destination, block, hit_half):
        return destination
    corner_half = HALF + 0.05
    nodes = [agent] + [block + np.array([sx * corner_half, sy * corner_half])
                       for sx in (-1.0, 1.0) for sy in (-1.0, 1.0)] + [destination]
    n = len(nodes)
    dist = np.full(n, np.inf)
    first_hop = [-1] * n
    dist[0] = 0.0
    done = [False] * n
    for _ in range(n):
        i = int(np.argmin(np.where(done, np.inf, dist)))
        if not np.isfinite(dist[i]):
            break
        done[i] = True
        for j in range(n):
            if done[j] or _segment_hits_square(nodes[i], nodes[j], block, hit_half):
                continue
            alt = dist[i] + float(np.linalg.norm(nodes[i] - nodes[j]))
            if alt < dist[j] - 1e-12:
                dist[j] = alt
                first_hop[j] = j if i == 0 else first_hop[i]
    if np.isfinite(dist[n - 1]) and first_hop[n - 1] >= 0:
        return nodes[first_hop[n - 1]]
    # agent sits inside the inflated square: back out via the nearest corner
    corners = nodes[1:5]
    return min(corners, key=lambda c: float(np.linalg.norm(agent - c)))


def _segment_hits_square(p0: np.ndarray, p1: np.ndarray, center: np.ndarray,
                         half: float) -> bool:
    """Slab test: does the segment p0->p1 cross the axis-aligned square?"""
    d = p1 - p0
    t_min, t_max = 0.0, 1.0
    for axis in range(2):
        lo, hi = center[axis] - half, center[axis] + half
        if abs(d[axis]) < 1e-12:
            if p0[axis] < lo or p0[axis] > hi:
                return False
        else:
            t0 = (lo - p0[axis]) / d[axis]
            t1 = (hi - p0[axis]) / d[axis]
            if t0 > t1:
                t0, t1 = t1, t0
            t_min = max(t_min, t0)
            t_max = min(t_max, t1)
            if t_min > t_max:
                return False
    return True




# ---------------------------------------------------------------------------
# Episodes and datasets
# ---------------------------------------------------------------------------


@dataclass
class Episode:
    domain: str
    variant: str
    seed: int
    observations: list
    action_chunks: list
    reward_trace: list

    def __post_init__(self):
        if len(self.observations) != len(self.action_chunks):
            raise ContractError("observation/chunk count mismatch")

    @property
    def success(self) -> bool:
        return max(self.reward_trace) >= SUCCESS_IOU


@dataclass
class DomainDataset:
    domain: str
    episodes: list = field(default_factory=list)

    def __post_init__(self):
        for ep in self.episodes:
            if ep.domain != self.domain:
                raise ContractError("episode domain does not match dataset")


def rollout_expert(domain: str, variant: str, seed: int,
                   cap: int = EPISODE_CAP) -> Episode:
    """Run the scripted expert once and package observations + action chunks."""
    rng = episode_rng(domain, variant, seed)
    state = reset(domain, variant, rng)
    observations: list[np.ndarray] = []
    actions: list[np.ndarray] = []
    rewards: list[float] = []
    settled = 0
    for _ in range(cap):
        observations.append(observe(state, rng))
        action = scripted_expert(state, rng)
        actions.append(action)
        state = step(state, action)
        rewards.append(reward(state))
        if rewards[-1] >= EXPERT_STOP_IOU:
            settled += 1
            if settled >= _HOLD_TAIL:
                break
    chunks = _chunks_from_actions(actions)
    return Episode(domain=domain, variant=variant, seed=seed,
                   observations=observations, action_chunks=chunks,
                   reward_trace=rewards)


def _chunks_from_actions(actions: list) -> list:
    arr = np.stack(actions)
    n = arr.shape[0]
    chunks = []
    for t in range(n):
        window = arr[t : t + CHUNK_HORIZON]
        if window.shape[0] < CHUNK_HORIZON:
            pad = np.repeat(window[-1:], CHUNK_HORIZON - window.shape[0], axis=0)
            window = np.concatenate([window, pad])
        chunks.append(ChunkedAction(window.copy(), position_dims=2))
    return chunks


def paper_mixture() -> list[tuple[str, str, int]]:
    """The benchmark data mixture: (domain, variant, episode count) cells."""
    return [
        ("source", "base", 100),
        ("target", "base", 100),
        ("source", "purple", 50),
        ("source", "purple_mirrored", 50),
        ("source", "white_mirrored", 50),
    ]


@dataclass
class GenerationReport:
    counts: dict
    retries: int


def generate_dataset(cells, seed: int) -> tuple[dict, GenerationReport]:
    """Roll expert episodes for every (domain, variant, count) cell.

    Failed episodes (max IoU below the success threshold) are regenerated
    with an incremented sub-seed; the retry count is reported. Returns
    one DomainDataset per domain present in the cells.
    """
    datasets: dict[str, DomainDataset] = {}
    counts: dict[str, int] = {}
    retries = 0
    for domain, variant, count in cells:
        _check_setting(domain, variant)
        if count < 0:
            raise ContractError(f"negative count for ({domain}, {variant})")
        ds = datasets.setdefault(domain, DomainDataset(domain=domain))
        for i in range(count):
            retry = 0
            while True:
                ep_seed = _episode_seed(seed, domain, variant, i, retry)
                ep = rollout_expert(domain, variant, ep_seed)
                if ep.success:
                    break
                retry += 1
                retries += 1
                if retry > 50:
                    raise ContractError(
                        f"expert kept failing for ({domain}, {variant}, item {i})"
                    )
            ds.episodes.append(ep)
        counts[f"{domain}/{variant}"] = counts.get(f"{domain}/{variant}", 0) + count
    return datasets, GenerationReport(counts=counts, retries=retries)


def _episode_seed(seed: int, domain: str, variant: str, index: int, retry: int) -> int:
    token = f"{seed}/{domain}/{variant}/{index}/{retry}".encode("utf-8")
    return zlib.crc32(token)


# ---------------------------------------------------------------------------
# Dataset serialization (line-delimited, one episode per line)
# ---------------------------------------------------------------------------

# Frozen field order per line: schema_version, domain, variant, seed,
# steps, observations (steps*OBS_DIM floats, row-major), chunks
# (steps*CHUNK_HORIZON*2 floats, row-major), rewards (steps floats).


def write_dataset(path, dataset: DomainDataset) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ep in dataset.episodes:
            record = {
                "schema_version": SCHEMA_VERSION,
                "domain": ep.domain,
                "variant": ep.variant,
                "seed": ep.seed,
                "steps": len(ep.observations),
                "observations": np.concatenate(ep.observations).tolist()
                if ep.observations else [],
                "chunks": np.concatenate(
                    [c.values.reshape(-1) for c in ep.action_chunks]
                ).tolist() if ep.action_chunks else [],
                "rewards": [float(r) for r in ep.reward_trace],
            }
            f.write(json.dumps(record) + "\n")


def read_dataset(path) -> DomainDataset:
    episodes: list[Episode] = []
    domain = None
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("schema_version") != SCHEMA_VERSION:
                raise ContractError(
                    f"{path}:{line_no}: unsupported schema {rec.get('schema_version')!r}"
                )
            n = rec["steps"]
            obs = np.asarray(rec["observations"], dtype=np.float64).reshape(n, OBS_DIM)
            chunk_vals = np.asarray(rec["chunks"], dtype=np.float64).reshape(
                n, CHUNK_HORIZON, 2
            )
            episodes.append(Episode(
                domain=rec["domain"], variant=rec["variant"], seed=rec["seed"],
                observations=[obs[t] for t in range(n)],
                action_chunks=[ChunkedAction(chunk_vals[t], position_dims=2)
                               for t in range(n)],
                reward_trace=rec["rewards"],
            ))
            if domain is None:
                domain = rec["domain"]
            elif rec["domain"] != domain:
                raise ContractError(f"{path}: mixes domains")
    if domain is None:
        raise ContractError(f"{path}: empty dataset file")
    return DomainDataset(domain=domain, episodes=episodes)


def action_norm_stats(dataset: DomainDataset) -> NormStats:
    return fit_norm_stats(dataset, "action")


# ---------------------------------------------------------------------------
# Closed-loop evaluation
# ---------------------------------------------------------------------------


def paper_eval_seeds() -> list[int]:
    """The fixed 100-seed evaluation list: seeds in [101, 9999], drawn with seed 42."""
    rng = np.random.default_rng(42)
    return [int(s) for s in rng.choice(np.arange(101, 10000), size=100, replace=False)]


@dataclass
class EvalResult:
    mean_reward: float
    success_rate: float
    per_seed: list  # (seed, max IoU) pairs


def evaluate_policy(policy_fn, variant: str, seeds, domain: str = "target",
                    cap: int = EPISODE_CAP) -> EvalResult:
    """Receding-horizon rollouts of ``policy_fn`` over the given seeds.

    ``policy_fn(obs) -> (CHUNK_HORIZON, 2) raw-space targets``; the first
    EXECUTE_STEPS entries are executed before re-planning. The per-seed
    score is the max IoU along the trace.
    """
    per_seed = []
    for seed in seeds:
        rng = episode_rng(domain, variant, int(seed))
        state = reset(domain, variant, rng)
        best = reward(state)
        t = 0
        while t < cap:
            obs = observe(state, rng)
            chunk = np.asarray(policy_fn(obs), dtype=np.float64)
            for k in range(min(EXECUTE_STEPS, cap - t)):
                state = step(state, chunk[k])
                best = max(best, reward(state))
                t += 1
        per_seed.append((int(seed), best))
    rewards = np.array([r for _, r in per_seed])
    return EvalResult(
        mean_reward=float(rewards.mean()) if len(rewards) else 0.0,
        success_rate=float(np.mean(rewards >= SUCCESS_IOU)) if len(rewards) else 0.0,
        per_seed=per_seed,
    )


def evaluate_expert(variant: str, seeds, domain: str = "target",
                    cap: int = EPISODE_CAP) -> EvalResult:
    """Closed-loop rollouts of the scripted expert (the data-quality gate)."""
    per_seed = []
    for seed in seeds:
        ep = rollout_expert(domain, variant, int(seed), cap=cap)
        per_seed.append((int(seed), max(ep.reward_trace)))
    rewards = np.array([r for _, r in per_seed])
    return EvalResult(
        mean_reward=float(rewards.mean()) if len(rewards) else 0.0,
        success_rate=float(np.mean(rewards >= SUCCESS_IOU)) if len(rewards) else 0.0,
        per_seed=per_seed,
    )
