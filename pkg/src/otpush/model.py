"""Encoder and policy networks, behaviour-cloning losses, and loss assembly.

The encoder is a pair of domain-specific dense stems feeding one shared
trunk that emits a single latent vector per sample; the policy head maps
that latent to a flattened action chunk. Domain "H" is the source
embodiment, "R" the target. All hidden layers use tanh so gradient
checks against central finite differences stay clean.

Forward functions are generic over tape variables and plain arrays: pass
``numkit.Var`` parameters to record gradients, ndarrays for fast
inference.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import numkit as nk
from . import transport
from .geometry import ChunkedAction, NormStats
from .numkit import ContractError, ShapeError

DOMAINS = ("H", "R")


@dataclass(frozen=True)
class ModelConfig:
    """Network dimensions; the defaults are the 2D-benchmark scale.

    The hidden nonlinearity is tanh (smooth, so finite-difference
    gradient checks behave); "identity" turns the stacks affine, which
    some structural tests rely on.
    """

    obs_dim_h: int = 10
    obs_dim_r: int = 10
    stem_width: int = 64
    trunk_width: int = 64
    latent_dim: int = 32
    head_width: int = 64
    horizon: int = 16
    action_dim: int = 2
    position_dims: int = 2
    activation: str = "tanh"
    init_scale: float = 1.0

    def to_dict(self) -> dict:
        return {
            "obs_dim_h": self.obs_dim_h, "obs_dim_r": self.obs_dim_r,
            "stem_width": self.stem_width, "trunk_width": self.trunk_width,
            "latent_dim": self.latent_dim, "head_width": self.head_width,
            "horizon": self.horizon, "action_dim": self.action_dim,
            "position_dims": self.position_dims, "activation": self.activation,
            "init_scale": self.init_scale,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


def _layer_dims(cfg: ModelConfig) -> list[tuple[str, int, int]]:
    return [
        ("stem_H/w0", cfg.obs_dim_h, cfg.stem_width),
        ("stem_H/w1", cfg.stem_width, cfg.stem_width),
        ("stem_R/w0", cfg.obs_dim_r, cfg.stem_width),
        ("stem_R/w1", cfg.stem_width, cfg.stem_width),
        ("trunk/w0", cfg.stem_width, cfg.trunk_width),
        ("trunk/w1", cfg.trunk_width, cfg.latent_dim),
        ("head/w0", cfg.latent_dim, cfg.head_width),
        ("head/w1", cfg.head_width, cfg.horizon * cfg.action_dim),
    ]


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Scaled-uniform fan-in init for weights, zeros for biases.

    Weight entries are drawn from U(-s, s) with s = init_scale / sqrt(fan_in).
    Weights on input dims that stay constant in training keep their init
    values, so init_scale also bounds how hard unseen input shifts (the
    appearance gap) perturb a trained stem.
    """
    params: dict[str, np.ndarray] = {}
    for name, fan_in, fan_out in _layer_dims(cfg):
        bound = cfg.init_scale / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[name.replace("/w", "/b")] = np.zeros((1, fan_out))
    return params


def encoder_keys(params: Mapping[str, np.ndarray]) -> list[str]:
    return [k for k in params if not k.startswith("head/")]


def policy_keys(params: Mapping[str, np.ndarray]) -> list[str]:
    return [k for k in params if k.startswith("head/")]


def _nonlin(x, activation: str):
    if activation == "tanh":
        return nk.tanh(x)
    if activation == "identity":
        return x
    raise ContractError(f"unknown activation {activation!r}")


def _dense(x, w, b, activation: str | None):
    out = nk.matmul(x, w) + b
    return out if activation is None else _nonlin(out, activation)


def encode(params: Mapping, obs, domain: str, activation: str = "tanh"):
    """Map an observation batch to latents through the domain stem + shared trunk."""
    if domain not in DOMAINS:
        raise ContractError(f"unknown domain {domain!r}")
    stem = f"stem_{domain}"
    obs_dim = params[f"{stem}/w0"].shape[0] if isinstance(params[f"{stem}/w0"], np.ndarray) \
        else params[f"{stem}/w0"].value.shape[0]
    width = obs.shape[1] if isinstance(obs, np.ndarray) else obs.value.shape[1]
    if width != obs_dim:
        raise ShapeError(f"obs dim {width} != {stem} input dim {obs_dim}")
    h = _dense(obs, params[f"{stem}/w0"], params[f"{stem}/b0"], activation)
    h = _dense(h, params[f"{stem}/w1"], params[f"{stem}/b1"], activation)
    h = _dense(h, params["trunk/w0"], params["trunk/b0"], activation)
    return _dense(h, params["trunk/w1"], params["trunk/b1"], None)


def decode(params: Mapping, z, activation: str = "tanh"):
    """Map latents to a flattened (B, horizon * action_dim) chunk prediction."""
    h = _dense(z, params["head/w0"], params["head/b0"], activation)
    return _dense(h, params["head/w1"], params["head/b1"], None)


def decode_chunk(params: Mapping[str, np.ndarray], z: np.ndarray,
                 cfg: ModelConfig) -> ChunkedAction:
    """Single-sample decode to a normalized-space action chunk."""
    flat = decode(params, np.asarray(z, dtype=np.float64).reshape(1, -1), cfg.activation)
    return ChunkedAction(
        flat.reshape(cfg.horizon, cfg.action_dim),
        normalized=True,
        position_dims=cfg.position_dims,
    )


def _elem_loss(diff, kind: str):
    if kind == "mse":
        return nk.mul(diff, diff) if isinstance(diff, nk.Var) else diff * diff
    if kind == "smooth_l1":
        return nk.smooth_l1(diff)
    raise ContractError(f"unknown loss kind {kind!r}")


def _loss_mask(horizon: int, action_dim: int, position_dims: int, domain: str) -> np.ndarray:
    """Human-domain loss covers position dims only; target covers all dims."""
    mask = np.ones((1, horizon * action_dim))
    if domain == "H" and position_dims < action_dim:
        keep = np.zeros(action_dim)
        keep[:position_dims] = 1.0
        mask[:] = np.tile(keep, horizon)
    return mask


def bc_loss(pred: ChunkedAction, target: ChunkedAction, domain: str,
            kind: str = "mse") -> float:
    """Mean per-element loss between one predicted and one target chunk."""
    if pred.horizon != target.horizon or pred.dim != target.dim:
        raise ContractError(
            f"chunk shapes differ: {pred.values.shape} vs {target.values.shape}"
        )
    if pred.normalized != target.normalized:
        raise ContractError("mixing normalized and raw chunks")
    mask = _loss_mask(pred.horizon, pred.dim, target.position_dims, domain)
    diff = (pred.values - target.values).reshape(1, -1)
    per_elem = _elem_loss(diff, kind) * mask
    return float(per_elem.sum() / mask.sum())


def bc_loss_taped(pred_flat: nk.Var, target: np.ndarray, domain: str,
                  cfg: ModelConfig, kind: str = "mse") -> nk.Var:
    """Batched taped BC loss; target is (B, horizon, action_dim) in normalized space."""
    tape = pred_flat.tape
    batch = target.shape[0]
    target_flat = tape.const(target.reshape(batch, -1))
    mask = _loss_mask(cfg.horizon, cfg.action_dim, cfg.position_dims, domain)
    diff = nk.sub(pred_flat, target_flat)
    per_elem = _elem_loss(diff, kind)
    masked = nk.mul(per_elem, tape.const(np.broadcast_to(mask, per_elem.value.shape).copy()))
    return nk.scale(nk.ssum(masked), 1.0 / (batch * mask.sum()))


@dataclass
class LossBreakdown:
    """Per-term objective values for one co-training step."""

    bc_h: float
    bc_r: float
    ot_joint: float
    total: float
    alpha: float


@dataclass
class Batch:
    """Sampled (observation, normalized action chunk) pairs for one domain."""

    obs: np.ndarray     # (B, obs_dim)
    chunks: np.ndarray  # (B, horizon, action_dim), normalized space


@dataclass
class StepOutcome:
    breakdown: LossBreakdown
    grads: dict[str, np.ndarray]
    sinkhorn_residual: float
    z_h: np.ndarray
    z_r: np.ndarray


def total_loss(
    params: dict[str, np.ndarray],
    batch_h: Batch,
    batch_r: Batch,
    cfg: ModelConfig,
    alpha: float,
    lam: float,
    epsilon: float,
    *,
    align: str | None = "ot",
    pairing: str = "dtw",
    bc_kind: str = "mse",
    mmd_sigma: float = 1.0,
    sinkhorn_iters: int = transport.SINKHORN_MAX_ITERS,
    sinkhorn_tol: float = transport.SINKHORN_TOL,
    domain_h: str = "H",
    want_grads: bool = True,
) -> StepOutcome:
    """Assemble BC + alignment losses on one tape and return value and gradients.

    The transport plan and DTW pairing are computed outside the tape and
    enter the recorded loss as constants. When ``alpha == 0`` the
    alignment term stays off the tape entirely (its value is still
    reported), so disabling it cannot perturb the BC gradients.
    """
    if batch_h.obs.shape[0] != batch_r.obs.shape[0]:
        raise ContractError("co-training batches must have equal size")
    tape = nk.Tape()
    pvars = {k: tape.leaf(v, name=k) for k, v in params.items()}
    obs_h = tape.const(batch_h.obs)
    obs_r = tape.const(batch_r.obs)
    z_h = encode(pvars, obs_h, domain_h, cfg.activation)
    z_r = encode(pvars, obs_r, "R", cfg.activation)
    bc_h_var = bc_loss_taped(decode(pvars, z_h, cfg.activation), batch_h.chunks,
                             domain_h, cfg, bc_kind)
    bc_r_var = bc_loss_taped(decode(pvars, z_r, cfg.activation), batch_r.chunks,
                             "R", cfg, bc_kind)
    total_var = nk.add(bc_h_var, bc_r_var)

    align_value = 0.0
    residual = 0.0
    # magnitude bound keeps squared distances finite too
    latents_ok = bool(np.all(np.abs(z_h.value) < 1e150)
                      and np.all(np.abs(z_r.value) < 1e150))
    if align is not None and not latents_ok:
        # numerical blowup: surface a non-finite total so the caller aborts,
        # instead of tripping the transport layer's input contracts
        align_value = float("nan")
    elif align == "ot":
        ot = transport.joint_ot_loss(
            z_h.value, z_r.value,
            batch_h.chunks, batch_r.chunks,
            lam=lam, epsilon=epsilon,
            max_iters=sinkhorn_iters, tol=sinkhorn_tol,
            pairing=pairing,
        )
        residual = ot.plan.marginal_residual
        if alpha != 0.0:
            coeff = ot.plan.matrix * transport.discount_weights(
                ot.shaped.base.shape, ot.shaped.pairs, ot.shaped.lam
            )
            dist_var = nk.pairwise_sqdist(z_h, z_r)
            align_var = nk.ssum(nk.mul(dist_var, tape.const(coeff)))
            align_value = float(align_var.value[0, 0])
            total_var = nk.add(total_var, nk.scale(align_var, alpha))
        else:
            align_value = ot.loss
    elif align == "mmd":
        if alpha != 0.0:
            align_var = _mmd_taped(tape, z_h, z_r, mmd_sigma)
            align_value = float(align_var.value[0, 0])
            total_var = nk.add(total_var, nk.scale(align_var, alpha))
        else:
            align_value = transport.mmd_loss(z_h.value, z_r.value, mmd_sigma)
    elif align is not None:
        raise ContractError(f"unknown alignment {align!r}")

    grads: dict[str, np.ndarray] = {}
    if want_grads:
        gmap = nk.backward(tape, total_var)
        grads = {k: gmap[v.nid] for k, v in pvars.items()}
    bc_h = float(bc_h_var.value[0, 0])
    bc_r = float(bc_r_var.value[0, 0])
    breakdown = LossBreakdown(
        bc_h=bc_h, bc_r=bc_r, ot_joint=align_value,
        total=bc_h + bc_r + alpha * align_value, alpha=alpha,
    )
    return StepOutcome(
        breakdown=breakdown, grads=grads, sinkhorn_residual=residual,
        z_h=z_h.value, z_r=z_r.value,
    )


def _mmd_taped(tape: nk.Tape, z_h: nk.Var, z_r: nk.Var, sigma: float) -> nk.Var:
    n = z_h.value.shape[0]
    m = z_r.value.shape[0]
    inv = -1.0 / (2.0 * sigma * sigma)
    k_hh = nk.ssum(nk.exp(nk.scale(nk.pairwise_sqdist(z_h, z_h), inv)))
    k_rr = nk.ssum(nk.exp(nk.scale(nk.pairwise_sqdist(z_r, z_r), inv)))
    k_hr = nk.ssum(nk.exp(nk.scale(nk.pairwise_sqdist(z_h, z_r), inv)))
    out = nk.add(nk.scale(k_hh, 1.0 / (n * n)), nk.scale(k_rr, 1.0 / (m * m)))
    return nk.add(out, nk.scale(k_hr, -2.0 / (n * m)))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = "otpush-checkpoint"
_CKPT_VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    opt_step: int
    norm_stats: dict[str, NormStats]
    model_config: ModelConfig
    config_hash: str
    step: int


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write a checkpoint: one JSON header line, then raw little-endian f8 data.

    The header lists arrays in sorted-name order with shapes, so the file
    bytes are a pure function of the checkpoint contents (no timestamps),
    and load/save round-trips are bit-exact.
    """
    arrays: list[tuple[str, np.ndarray]] = []
    for group, d in (("params", ckpt.params), ("opt_m", ckpt.opt_m), ("opt_v", ckpt.opt_v)):
        for name in sorted(d):
            arrays.append((f"{group}:{name}", np.ascontiguousarray(d[name], dtype="<f8")))
    header = {
        "magic": _CKPT_MAGIC,
        "version": _CKPT_VERSION,
        "config_hash": ckpt.config_hash,
        "step": ckpt.step,
        "opt_step": ckpt.opt_step,
        "model_config": ckpt.model_config.to_dict(),
        "norm_stats": {k: v.to_dict() for k, v in sorted(ckpt.norm_stats.items())},
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for _, a in arrays:
            f.write(a.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("magic") != _CKPT_MAGIC or header.get("version") != _CKPT_VERSION:
            raise ContractError(f"not a recognized checkpoint: {path}")
        groups: dict[str, dict[str, np.ndarray]] = {"params": {}, "opt_m": {}, "opt_v": {}}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape).copy()
            group, name = entry["name"].split(":", 1)
            groups[group][name] = data
    return Checkpoint(
        params=groups["params"],
        opt_m=groups["opt_m"],
        opt_v=groups["opt_v"],
        opt_step=header["opt_step"],
        norm_stats={k: NormStats.from_dict(v) for k, v in header["norm_stats"].items()},
        model_config=ModelConfig.from_dict(header["model_config"]),
        config_hash=header["config_hash"],
        step=header["step"],
    )
