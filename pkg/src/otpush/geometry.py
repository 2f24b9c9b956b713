"""Rigid-body poses, action chunks, reference-frame projection, and z-score stats.

Covers the data-processing math shared by both embodiments: expressing
future hand/effector positions in a stable anchor frame, resampling
sparse pose samples to a fixed-length trajectory, and per-domain
normalization of proprioception and actions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numkit import ContractError

# Quaternions are (w, x, y, z), always unit up to 1e-9.
_QUAT_TOL = 1e-9

# Standard deviations are clamped to this floor so constant dimensions
# (e.g. a never-moving gripper) survive normalize/denormalize round trips.
STD_FLOOR = 1e-6


def _quat_normalize(q: np.ndarray) -> np.ndarray:
    n = math.sqrt(float(np.dot(q, q)))
    if n == 0.0:
        raise ContractError("zero quaternion")
    return q / n


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_rotate(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Rotate point p by unit quaternion q."""
    w, x, y, z = q
    u = np.array([x, y, z])
    return p + 2.0 * np.cross(u, np.cross(u, p) + w * p)


def quat_to_ypr(q: np.ndarray) -> np.ndarray:
    """Unit quaternion to (yaw, pitch, roll), intrinsic z-y-x convention."""
    w, x, y, z = q
    yaw = math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))
    s = 2.0 * (w * y - z * x)
    pitch = math.asin(max(-1.0, min(1.0, s)))
    roll = math.atan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))
    return np.array([yaw, pitch, roll])


def ypr_to_quat(ypr: np.ndarray) -> np.ndarray:
    yaw, pitch, roll = ypr
    cy, sy = math.cos(yaw / 2), math.sin(yaw / 2)
    cp, sp = math.cos(pitch / 2), math.sin(pitch / 2)
    cr, sr = math.cos(roll / 2), math.sin(roll / 2)
    return np.array([
        cy * cp * cr + sy * sp * sr,
        cy * cp * sr - sy * sp * cr,
        cy * sp * cr + sy * cp * sr,
        sy * cp * cr - cy * sp * sr,
    ])


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    out = np.asarray(a, dtype=np.float64)
    wrapped = out - 2.0 * np.pi * np.floor((out + np.pi) / (2.0 * np.pi))
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    return wrapped if wrapped.ndim else float(wrapped)


@dataclass(frozen=True)
class Pose3:
    """Rigid transform: rotation (unit quaternion, wxyz) then translation."""

    translation: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        if abs(float(np.dot(q, q)) - 1.0) > 1e-6:
            q = _quat_normalize(q)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", _quat_normalize(q))

    @staticmethod
    def identity() -> "Pose3":
        return Pose3(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    def compose(self, other: "Pose3") -> "Pose3":
        """self applied after other: (self o other)(p) = self(other(p))."""
        return Pose3(
            self.translation + quat_rotate(self.rotation, other.translation),
            quat_mul(self.rotation, other.rotation),
        )

    def inverse(self) -> "Pose3":
        qinv = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose3(-quat_rotate(qinv, self.translation), qinv)

    def apply(self, point: np.ndarray) -> np.ndarray:
        return self.translation + quat_rotate(self.rotation, np.asarray(point, dtype=np.float64))


@dataclass
class ChunkedAction:
    """A length-T action trajectory: positions plus optional Euler/gripper dims.

    ``position_dims`` marks how many leading columns are Cartesian
    positions (the subspace shared across embodiments). ``angle_dims``
    lists columns holding angles in radians. ``normalized`` flags whether
    values are in z-scored space; mixing normalized and raw chunks in one
    operation is a contract error.
    """

    values: np.ndarray
    normalized: bool = False
    position_dims: int | None = None
    angle_dims: tuple[int, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ContractError(f"chunk values must be (T, d) with T >= 1, got {v.shape}")
        if np.isnan(v).any():
            raise ContractError("chunk contains NaN")
        self.values = v
        if self.position_dims is None:
            self.position_dims = v.shape[1]

    @property
    def horizon(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def positions(self) -> np.ndarray:
        return self.values[:, : self.position_dims]


def chunk_in_reference_frame(
    hand_positions: Sequence[Pose3],
    device_frames: Sequence[Pose3],
    anchor: Pose3,
    include_euler: bool = False,
) -> ChunkedAction:
    """Project future poses into the anchor frame.

    Entry i is ``(anchor^-1 o device_frames[i])`` applied to
    ``hand_positions[i]``; with ``include_euler`` the chunk carries
    (x, y, z, yaw, pitch, roll), otherwise positions only.
    """
    if len(hand_positions) != len(device_frames):
        raise ContractError(
            f"{len(hand_positions)} hand poses vs {len(device_frames)} device frames"
        )
    if len(hand_positions) < 1:
        raise ContractError("need at least one pose")
    anchor_inv = anchor.inverse()
    rows = []
    for p, frame in zip(hand_positions, device_frames):
        rel = anchor_inv.compose(frame).compose(p)
        if include_euler:
            rows.append(np.concatenate([rel.translation, quat_to_ypr(rel.rotation)]))
        else:
            rows.append(rel.translation)
    values = np.stack(rows)
    return ChunkedAction(
        values,
        position_dims=3,
        angle_dims=(3, 4, 5) if include_euler else (),
    )


def resample_chunk(samples: ChunkedAction, target_len: int) -> ChunkedAction:
    """Piecewise-linear resampling of m samples to target_len steps.

    Linear per component; angle columns interpolate along the shortest
    arc and wrap to (-pi, pi]. Endpoints are preserved exactly (angle
    columns up to canonical 2-pi wrapping).
    """
    m = samples.horizon
    if m < 2:
        raise ContractError(f"need at least 2 samples to resample, got {m}")
    if target_len < m:
        raise ContractError(f"target_len {target_len} < sample count {m}")
    v = samples.values
    out = np.empty((target_len, samples.dim))
    u = np.arange(target_len) * (m - 1) / (target_len - 1)
    lo = np.minimum(u.astype(int), m - 2)
    frac = u - lo
    angle_cols = set(samples.angle_dims)
    for c in range(samples.dim):
        a, b = v[lo, c], v[lo + 1, c]
        if c in angle_cols:
            out[:, c] = wrap_angle(a + frac * wrap_angle(b - a))
        else:
            out[:, c] = a + frac * (b - a)
    out[0] = _wrap_row(v[0], angle_cols)
    out[-1] = _wrap_row(v[-1], angle_cols)
    return ChunkedAction(
        out,
        normalized=samples.normalized,
        position_dims=samples.position_dims,
        angle_dims=samples.angle_dims,
    )


def _wrap_row(row: np.ndarray, angle_cols: set) -> np.ndarray:
    out = row.copy()
    for c in angle_cols:
        out[c] = wrap_angle(out[c])
    return out


@dataclass
class NormStats:
    """Per-dimension z-score statistics for one embodiment's field.

    Population standard deviation, clamped below at ``STD_FLOOR`` so
    constant dimensions normalize to zero instead of blowing up.
    """

    mean: np.ndarray
    std: np.ndarray
    domain: str

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if self.mean.shape != self.std.shape:
            raise ContractError("mean/std dim mismatch")
        if np.any(self.std < STD_FLOOR):
            raise ContractError("std below floor")

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean

    def normalize_chunk(self, chunk: ChunkedAction) -> ChunkedAction:
        if chunk.normalized:
            raise ContractError("chunk already normalized")
        return ChunkedAction(
            self.normalize(chunk.values),
            normalized=True,
            position_dims=chunk.position_dims,
            angle_dims=chunk.angle_dims,
        )

    def denormalize_chunk(self, chunk: ChunkedAction) -> ChunkedAction:
        if not chunk.normalized:
            raise ContractError("chunk is not normalized")
        return ChunkedAction(
            self.denormalize(chunk.values),
            normalized=False,
            position_dims=chunk.position_dims,
            angle_dims=chunk.angle_dims,
        )

    def to_dict(self) -> dict:
        return {"domain": self.domain, "mean": self.mean.tolist(), "std": self.std.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "NormStats":
        return NormStats(np.array(d["mean"]), np.array(d["std"]), d["domain"])


def fit_norm_stats(dataset, field: str) -> NormStats:
    """Fit per-dimension mean / population std over one domain's records.

    ``dataset`` is any object with ``domain`` and ``episodes`` attributes,
    each episode carrying ``observations`` (for field "proprio") and
    ``action_chunks`` (for field "action"). Timesteps across all episodes
    are pooled; chunk rows all count.
    """
    if field not in ("proprio", "action"):
        raise ContractError(f"unknown field {field!r}")
    episodes = list(dataset.episodes)
    if not episodes:
        raise ContractError("empty dataset")
    rows: list[np.ndarray] = []
    for ep in episodes:
        if ep.domain != dataset.domain:
            raise ContractError("dataset mixes domains")
        if field == "proprio":
            rows.extend(np.asarray(o, dtype=np.float64) for o in ep.observations)
        else:
            for chunk in ep.action_chunks:
                if chunk.normalized:
                    raise ContractError("cannot fit stats on normalized chunks")
                rows.extend(chunk.values)
    data = np.stack(rows)
    mean = data.mean(axis=0)
    std = np.maximum(data.std(axis=0), STD_FLOOR)
    return NormStats(mean, std, dataset.domain)
