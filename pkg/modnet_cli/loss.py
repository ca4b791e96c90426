"""MODNet CLI — Feature-preserving projection loss, repulsion term and the multi-offset objective."""

import math
from dataclasses import dataclass, fields
from typing import List, Sequence, Tuple

import numpy as np

from modnet_cli.autodiff import Tensor, add, scale
from modnet_cli.error_reporter import LossError
from modnet_cli.geom import GroundTruthPatch
from modnet_cli.model import N_SCALES, ForwardOutput


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.97
    beta: float = 0.2
    support_angle_deg: float = 15.0
    m_final: int = 500
    r_final_frac: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise LossError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta < 0:
            raise LossError(f"beta must be nonnegative, got {self.beta}")
        if not 0 < self.support_angle_deg <= 180:
            raise LossError(f"support angle must lie in (0, 180], got {self.support_angle_deg}")

    @property
    def support_denominator(self) -> float:
        """1 - cos(ε_n)."""
        return 1.0 - math.cos(math.radians(self.support_angle_deg))


def _check_gt(gt: GroundTruthPatch):
    if gt.m < 1:
        raise LossError("empty ground-truth patch")
    if not gt.dobb > 0:
        raise LossError("degenerate ground-truth patch")


def _log_weights(p: np.ndarray, gt: GroundTruthPatch, cfg: LossConfig):
    d = p - gt.gt_points
    sq = np.einsum("ij,ij->i", d, d)
    eps_p = 4.0 * math.sqrt(gt.dobb / gt.m)
    # n_ṗ is the normal of the nearest ground-truth point, held constant
    n_p = gt.gt_normals[int(np.argmin(sq))]
    log_phi = -sq / (eps_p * eps_p)
    log_theta = -(1.0 - gt.gt_normals @ n_p) / cfg.support_denominator
    return d, eps_p, log_phi + log_theta


def projection_weights(p, gt: GroundTruthPatch, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """The φ·θ weights of the projection loss, unnormalized."""
    _check_gt(gt)
    _, _, logw = _log_weights(np.asarray(p, dtype=np.float64), gt, cfg)
    return np.exp(logw)


def projection_terms(p, gt: GroundTruthPatch, cfg: LossConfig = LossConfig()) -> Tuple[float, np.ndarray]:
    """(L_s, dL_s/dṗ) for one displaced point."""
    _check_gt(gt)
    p = np.asarray(p, dtype=np.float64)
    d, eps_p, logw = _log_weights(p, gt, cfg)
    w = np.exp(logw - logw.max())
    residual = np.einsum("ij,ij->i", d, gt.gt_normals)
    a = np.abs(residual)
    denom = w.sum()
    value = float(a @ w / denom)
    dw = (-2.0 / (eps_p * eps_p)) * d * w[:, None]
    grad = ((np.sign(residual) * w) @ gt.gt_normals + (a - value) @ dw) / denom
    return value, grad


def repulsion_terms(p, gt: GroundTruthPatch) -> Tuple[float, np.ndarray]:
    """(L_r, subgradient) with L_r the largest distance to the patch; ties go to the lowest index."""
    if gt.m < 1:
        raise LossError("empty ground-truth patch")
    d = np.asarray(p, dtype=np.float64) - gt.gt_points
    dist = np.sqrt(np.einsum("ij,ij->i", d, d))
    j = int(np.argmax(dist))
    grad = d[j] / dist[j] if dist[j] > 0 else np.zeros(3)
    return float(dist[j]), grad


def _batched(op: str, p_dot: Tensor, gts: Sequence[GroundTruthPatch], terms) -> Tensor:
    if p_dot.data.ndim != 2 or p_dot.shape[1] != 3 or p_dot.shape[0] != len(gts):
        raise LossError(f"{op}: displaced points {p_dot.shape} do not match {len(gts)} patches")
    batch = len(gts)
    values = np.empty(batch)
    grads = np.empty((batch, 3))
    for b, gt in enumerate(gts):
        values[b], grads[b] = terms(p_dot.data[b], gt)

    def backward(g):
        return (grads * (float(g) / batch),)

    return p_dot.tape.emit(op, (p_dot,), np.array(values.mean()), backward)


def projection_loss(p_dot: Tensor, gts: Sequence[GroundTruthPatch], cfg: LossConfig = LossConfig()) -> Tensor:
    """Batch mean of L_s over [batch, 3] displaced points."""
    return _batched("projection_loss", p_dot, gts, lambda p, gt: projection_terms(p, gt, cfg))


def repulsion_loss(p_dot: Tensor, gts: Sequence[GroundTruthPatch]) -> Tensor:
    return _batched("repulsion_loss", p_dot, gts, repulsion_terms)


def _mix(ls: Tensor, lr: Tensor, cfg: LossConfig) -> Tensor:
    return add(scale(ls, cfg.alpha), scale(lr, 1.0 - cfg.alpha))


def patch_loss(p_dot: Tensor, gts: Sequence[GroundTruthPatch], cfg: LossConfig = LossConfig()) -> Tensor:
    """α·L_s + (1 − α)·L_r."""
    return _mix(projection_loss(p_dot, gts, cfg), repulsion_loss(p_dot, gts), cfg)


@dataclass
class LossBreakdown:
    L_s1: float = 0.0
    L_s2: float = 0.0
    L_s3: float = 0.0
    L_s_final: float = 0.0
    L_r1: float = 0.0
    L_r2: float = 0.0
    L_r3: float = 0.0
    L_r_final: float = 0.0
    L_p1: float = 0.0
    L_p2: float = 0.0
    L_p3: float = 0.0
    L_dp: float = 0.0
    L_final: float = 0.0
    L_total: float = 0.0

    LOG_COLUMNS = ("L_s1", "L_s2", "L_s3", "L_r1", "L_r2", "L_r3", "L_dp", "L_final", "L_total")

    def log_row(self) -> List[float]:
        return [getattr(self, c) for c in self.LOG_COLUMNS]

    def is_finite(self) -> bool:
        return all(math.isfinite(getattr(self, f.name)) for f in fields(self))

    @classmethod
    def mean(cls, items: Sequence["LossBreakdown"]) -> "LossBreakdown":
        if not items:
            return cls()
        return cls(**{f.name: float(np.mean([getattr(i, f.name) for i in items])) for f in fields(cls)})


def total_loss(output: ForwardOutput, gt_per_scale: Sequence[Sequence[GroundTruthPatch]],
               gt_final: Sequence[GroundTruthPatch], cfg: LossConfig = LossConfig()) -> Tuple[LossBreakdown, Tensor]:
    """L_total = β·(L_p^1 + L_p^2 + L_p^3) + L_p^final, batch-averaged.

    The per-scale terms supervise the pre-offsets; the final term supervises dp.
    """
    if len(gt_per_scale) != N_SCALES:
        raise LossError(f"expected {N_SCALES} per-scale ground-truth lists, got {len(gt_per_scale)}")
    br = LossBreakdown()
    l_dp = None
    for k in range(N_SCALES):
        pre = output.pre_offsets[k]
        ls = projection_loss(pre, gt_per_scale[k], cfg)
        lr = repulsion_loss(pre, gt_per_scale[k])
        lp = _mix(ls, lr, cfg)
        setattr(br, f"L_s{k + 1}", float(ls.data))
        setattr(br, f"L_r{k + 1}", float(lr.data))
        setattr(br, f"L_p{k + 1}", float(lp.data))
        l_dp = lp if l_dp is None else add(l_dp, lp)

    ls_f = projection_loss(output.dp, gt_final, cfg)
    lr_f = repulsion_loss(output.dp, gt_final)
    l_final = _mix(ls_f, lr_f, cfg)
    total = add(scale(l_dp, cfg.beta), l_final)

    br.L_s_final = float(ls_f.data)
    br.L_r_final = float(lr_f.data)
    br.L_dp = float(l_dp.data)
    br.L_final = float(l_final.data)
    br.L_total = float(total.data)
    return br, total
