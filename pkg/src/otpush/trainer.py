"""The co-training loop: sampling, loss assembly, AdamW steps, logs, checkpoints.

One loop serves six methods through a small dispatch table:

- ``egobridge``     BC + alpha * DTW-shaped joint OT
- ``standard_ot``   BC + alpha * unshaped (marginal) OT
- ``mmd``           BC + alpha * RBF-kernel MMD
- ``cotrain``       BC only (the OT value is still computed and logged)
- ``target_only``   BC on target data sampled twice, no source data
- ``mse_pair``      egobridge with pointwise-MSE pairing instead of DTW

``cotrain`` runs exactly the ``egobridge`` code path with the alignment
term kept off the tape, and ``standard_ot`` is ``egobridge`` with the
discount disabled, so the documented method reductions hold bitwise.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import model as model_mod
from . import pushmini
from . import transport
from .geometry import NormStats
from .model import Batch, Checkpoint, LossBreakdown, ModelConfig
from .numkit import AdamWState, ContractError, SeededRng, adamw_step
from .pushmini import DomainDataset

METHODS = ("egobridge", "standard_ot", "mmd", "cotrain", "target_only", "mse_pair")

# Methods whose objective has no alignment weight; alpha is ignored there.
_NO_ALPHA_METHODS = ("cotrain", "target_only")

STEM_FOR_DOMAIN = {"source": "H", "target": "R"}


class ConfigError(ContractError):
    """Bad training configuration or config file."""


class TrainAbort(RuntimeError):
    """Training hit a NaN loss; the last good checkpoint was retained."""


@dataclass
class TrainConfig:
    method: str = "egobridge"
    alpha: float = 0.2
    lam: float = 0.1
    blur: float = 0.01
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-6
    max_iters: int = 20000
    eval_every: int = 2000
    seed: int = 0
    source_dataset: str = ""
    target_dataset: str = ""
    sinkhorn_max_iters: int = transport.SINKHORN_MAX_ITERS
    sinkhorn_tol: float = transport.SINKHORN_TOL
    mmd_sigma: float = 1.0
    eval_seeds: int = 20
    bc_loss: str = "mse"
    init_scale: float = 1.0

    def canonical_text(self) -> str:
        return "".join(
            f"{_CONFIG_KEYS[f.name]} = {getattr(self, f.name)}\n" for f in fields(self)
        )


# Config-file key per field; "lambda" is a Python keyword, hence the alias.
_CONFIG_KEYS = {f.name: ("lambda" if f.name == "lam" else f.name)
                for f in fields(TrainConfig)}
_FIELD_FOR_KEY = {v: k for k, v in _CONFIG_KEYS.items()}


def parse_config(text: str) -> TrainConfig:
    """Parse the flat ``key = value`` config format; unknown keys are errors."""
    values: dict[str, object] = {}
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in _FIELD_FOR_KEY:
            raise ConfigError(f"line {line_no}: unknown config key {key!r}")
        name = _FIELD_FOR_KEY[key]
        if name in values:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        values[name] = value
    kwargs: dict[str, object] = {}
    for f in fields(TrainConfig):
        if f.name not in values:
            continue
        raw_value = values[f.name]
        try:
            if f.type == "int":
                kwargs[f.name] = int(raw_value)
            elif f.type == "float":
                kwargs[f.name] = float(raw_value)
            else:
                kwargs[f.name] = str(raw_value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {_CONFIG_KEYS[f.name]!r}: {raw_value!r}") from exc
    config = TrainConfig(**kwargs)
    validate_config(config)
    return config


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def validate_config(config: TrainConfig) -> None:
    if config.method not in METHODS:
        raise ConfigError(f"unknown method {config.method!r}; expected one of {METHODS}")
    if config.method in _NO_ALPHA_METHODS and config.alpha != 0.0:
        warnings.warn(
            f"alpha = {config.alpha} is ignored by method {config.method!r}",
            stacklevel=2,
        )
    if config.batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if not 0.0 < config.lam <= 1.0:
        raise ConfigError(f"lambda must be in (0, 1], got {config.lam}")
    if config.blur <= 0.0:
        raise ConfigError(f"blur must be positive, got {config.blur}")
    if config.max_iters < 0:
        raise ConfigError("max_iters must be >= 0")
    if config.bc_loss not in ("mse", "smooth_l1"):
        raise ConfigError(f"unknown bc_loss {config.bc_loss!r}")
    needs_source = config.method != "target_only"
    if needs_source and not config.source_dataset:
        raise ConfigError("source_dataset path is required")
    if not config.target_dataset:
        raise ConfigError("target_dataset path is required")


@dataclass
class _MethodSpec:
    align: str | None
    pairing: str
    use_alpha: bool


_DISPATCH = {
    "egobridge": _MethodSpec(align="ot", pairing="dtw", use_alpha=True),
    "standard_ot": _MethodSpec(align="ot", pairing="none", use_alpha=True),
    "mmd": _MethodSpec(align="mmd", pairing="dtw", use_alpha=True),
    "cotrain": _MethodSpec(align="ot", pairing="dtw", use_alpha=False),
    "target_only": _MethodSpec(align=None, pairing="dtw", use_alpha=False),
    "mse_pair": _MethodSpec(align="ot", pairing="mse", use_alpha=True),
}


def effective_signature(config: TrainConfig) -> str:
    """Canonical description of the training program a config runs.

    Two configs with equal signatures produce bit-identical parameter
    trajectories; in particular the documented method reductions
    (egobridge at alpha 0 vs cotrain, egobridge at lambda 1 vs
    standard_ot) collapse to the same signature, and so share a
    checkpoint config hash.
    """
    spec = _DISPATCH[config.method]
    alpha = config.alpha if spec.use_alpha else 0.0
    lines = [
        f"seed = {config.seed}",
        f"batch_size = {config.batch_size}",
        f"lr = {config.lr}",
        f"weight_decay = {config.weight_decay}",
        f"max_iters = {config.max_iters}",
        f"bc_loss = {config.bc_loss}",
        f"init_scale = {config.init_scale}",
        f"data_mode = {'target_twice' if config.method == 'target_only' else 'paired'}",
    ]
    if spec.align is None or alpha == 0.0:
        lines.append("alignment = none")
    elif spec.align == "ot":
        lam = 1.0 if config.method == "standard_ot" else config.lam
        pairing = "none" if (spec.pairing == "none" or lam == 1.0) else spec.pairing
        lines.append(
            f"alignment = ot(pairing={pairing}, lambda={lam}, alpha={alpha}, "
            f"blur={config.blur}, sinkhorn={config.sinkhorn_max_iters}/{config.sinkhorn_tol})"
        )
    else:
        lines.append(f"alignment = mmd(sigma={config.mmd_sigma}, alpha={alpha})")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


@dataclass
class SamplePool:
    """All (observation, normalized chunk) records of one domain, stacked.

    Observations are mean-centered per embodiment (no variance scaling:
    dimensions that are constant within a domain must stay bounded when
    they shift at evaluation time); action chunks are fully z-scored.
    """

    domain: str
    obs: np.ndarray
    chunks: np.ndarray
    action_stats: NormStats
    obs_stats: NormStats

    @staticmethod
    def from_dataset(dataset: DomainDataset) -> "SamplePool":
        if not dataset.episodes:
            raise ContractError(f"dataset for domain {dataset.domain!r} is empty")
        stats = pushmini.action_norm_stats(dataset)
        obs_rows = []
        chunk_rows = []
        for ep in dataset.episodes:
            for obs, chunk in zip(ep.observations, ep.action_chunks):
                obs_rows.append(np.asarray(obs, dtype=np.float64))
                chunk_rows.append(stats.normalize(chunk.values))
        raw_obs = np.stack(obs_rows)
        obs_stats = NormStats(raw_obs.mean(axis=0), np.ones(raw_obs.shape[1]),
                              dataset.domain)
        return SamplePool(
            domain=dataset.domain,
            obs=obs_stats.normalize(raw_obs),
            chunks=np.stack(chunk_rows),
            action_stats=stats,
            obs_stats=obs_stats,
        )

    @property
    def size(self) -> int:
        return self.obs.shape[0]


def sample_batch(pool, batch_size: int, rng: np.random.Generator) -> Batch:
    """Uniform with-replacement draws over a pool's (obs, normalized chunk) records."""
    if isinstance(pool, DomainDataset):
        pool = SamplePool.from_dataset(pool)
    if pool.size < 1:
        raise ContractError("cannot sample from an empty pool")
    idx = rng.integers(0, pool.size, size=batch_size)
    return Batch(obs=pool.obs[idx], chunks=pool.chunks[idx])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class LogRow:
    step: int
    breakdown: LossBreakdown
    sinkhorn_residual: float
    wall_clock: float
    eval_success_rate: float | None = None


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, row: LogRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise ContractError("log steps must be strictly increasing")
        self.rows.append(row)

    def to_csv(self) -> str:
        lines = ["step,bc_H,bc_R,ot_joint,total,sinkhorn_residual,eval_success_rate"]
        for r in self.rows:
            b = r.breakdown
            ev = "" if r.eval_success_rate is None else repr(r.eval_success_rate)
            lines.append(
                f"{r.step},{b.bc_h!r},{b.bc_r!r},{b.ot_joint!r},{b.total!r},"
                f"{r.sinkhorn_residual!r},{ev}"
            )
        return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    params: dict
    opt_state: AdamWState
    log: TrainLog
    checkpoint: Checkpoint
    model_config: ModelConfig
    aborted: bool = False


def make_policy(params: dict, cfg: ModelConfig, action_stats: NormStats,
                obs_stats: NormStats, domain: str = "target"):
    """Closed-loop policy: observation -> raw-space action chunk."""
    stem = STEM_FOR_DOMAIN[domain]

    def policy(obs: np.ndarray) -> np.ndarray:
        centered = obs_stats.normalize(np.asarray(obs, dtype=np.float64)).reshape(1, -1)
        z = model_mod.encode(params, centered, stem, cfg.activation)
        flat = model_mod.decode(params, z, cfg.activation)
        chunk = flat.reshape(cfg.horizon, cfg.action_dim)
        return action_stats.denormalize(chunk)

    return policy


def quick_eval(params: dict, cfg: ModelConfig, pool: "SamplePool",
               n_seeds: int, variant: str = "base") -> float:
    seeds = pushmini.paper_eval_seeds()[:n_seeds]
    policy = make_policy(params, cfg, pool.action_stats, pool.obs_stats)
    return pushmini.evaluate_policy(policy, variant, seeds).success_rate


def train(config: TrainConfig, out_dir) -> TrainResult:
    """Run the co-training loop and leave a checkpoint + CSV log in out_dir."""
    validate_config(config)
    spec = _DISPATCH[config.method]
    target_ds = pushmini.read_dataset(config.target_dataset)
    if target_ds.domain != "target":
        raise ConfigError(f"{config.target_dataset} holds {target_ds.domain!r} data")
    pool_r = SamplePool.from_dataset(target_ds)
    if config.method == "target_only":
        pool_h = pool_r
        domain_h = "R"
    else:
        source_ds = pushmini.read_dataset(config.source_dataset)
        if source_ds.domain != "source":
            raise ConfigError(f"{config.source_dataset} holds {source_ds.domain!r} data")
        pool_h = SamplePool.from_dataset(source_ds)
        domain_h = "H"

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.ckpt"

    rng = SeededRng(config.seed)
    sample_rng_h = rng.stream("sample_H")
    sample_rng_r = rng.stream("sample_R")
    cfg = ModelConfig(
        obs_dim_h=pushmini.OBS_DIM, obs_dim_r=pushmini.OBS_DIM,
        horizon=pushmini.CHUNK_HORIZON, action_dim=2, position_dims=2,
        init_scale=config.init_scale,
    )
    params = model_mod.init_params(cfg, rng.stream("init"))
    opt = AdamWState.init(params)
    epsilon = transport.blur_to_epsilon(config.blur)
    alpha = config.alpha if spec.use_alpha else 0.0
    lam = 1.0 if config.method == "standard_ot" else config.lam
    norm_stats = {"target": pool_r.action_stats, "target_obs": pool_r.obs_stats}
    if config.method != "target_only":
        norm_stats["source"] = pool_h.action_stats
        norm_stats["source_obs"] = pool_h.obs_stats
    cfg_hash = model_mod.config_hash(effective_signature(config))

    log = TrainLog()
    start = time.monotonic()

    def checkpoint_now(step: int) -> Checkpoint:
        ckpt = Checkpoint(
            params=params, opt_m=opt.m, opt_v=opt.v, opt_step=opt.step,
            norm_stats=norm_stats, model_config=cfg, config_hash=cfg_hash, step=step,
        )
        model_mod.save_checkpoint(ckpt_path, ckpt)
        return ckpt

    ckpt = checkpoint_now(0)
    for step_idx in range(1, config.max_iters + 1):
        batch_h = sample_batch(pool_h, config.batch_size, sample_rng_h)
        batch_r = sample_batch(pool_r, config.batch_size, sample_rng_r)
        outcome = model_mod.total_loss(
            params, batch_h, batch_r, cfg,
            alpha=alpha, lam=lam, epsilon=epsilon,
            align=spec.align, pairing=spec.pairing, bc_kind=config.bc_loss,
            mmd_sigma=config.mmd_sigma,
            sinkhorn_iters=config.sinkhorn_max_iters,
            sinkhorn_tol=config.sinkhorn_tol,
            domain_h=domain_h,
        )
        if not np.isfinite(outcome.breakdown.total):
            # params have not been stepped with the bad gradient yet
            checkpoint_now(step_idx - 1)
            (out_dir / "train_log.csv").write_text(log.to_csv(), encoding="utf-8")
            raise TrainAbort(
                f"non-finite loss at step {step_idx}; last good checkpoint: {ckpt_path}"
            )
        params, opt = adamw_step(params, outcome.grads, opt,
                                 lr=config.lr, weight_decay=config.weight_decay)
        eval_rate = None
        if config.eval_every > 0 and step_idx % config.eval_every == 0:
            eval_rate = quick_eval(params, cfg, pool_r, config.eval_seeds)
            ckpt = checkpoint_now(step_idx)
        log.append(LogRow(
            step=step_idx, breakdown=outcome.breakdown,
            sinkhorn_residual=outcome.sinkhorn_residual,
            wall_clock=time.monotonic() - start,
            eval_success_rate=eval_rate,
        ))
    ckpt = checkpoint_now(config.max_iters)
    (out_dir / "train_log.csv").write_text(log.to_csv(), encoding="utf-8")
    return TrainResult(params=params, opt_state=opt, log=log, checkpoint=ckpt,
                       model_config=cfg)


def evaluate_checkpoint(ckpt: Checkpoint, variant: str, seeds,
                        domain: str = "target") -> pushmini.EvalResult:
    """Closed-loop evaluation of a trained checkpoint on one setting."""
    stats = ckpt.norm_stats.get(domain)
    obs_stats = ckpt.norm_stats.get(f"{domain}_obs")
    if stats is None or obs_stats is None:
        raise ContractError(f"checkpoint has no normalization stats for {domain!r}")
    policy = make_policy(ckpt.params, ckpt.model_config, stats, obs_stats,
                         domain=domain)
    return pushmini.evaluate_policy(policy, variant, seeds, domain=domain)
