import math

import numpy as np
import pytest

from modnet_cli.autodiff import Parameter, Tape
from modnet_cli.error_reporter import LossError
from modnet_cli.geom import GroundTruthPatch
from modnet_cli.loss import (
    LossConfig,
    patch_loss,
    projection_loss,
    projection_terms,
    projection_weights,
    repulsion_loss,
    repulsion_terms,
    total_loss,
)
from modnet_cli.model import ForwardOutput


def _random_gt(rng, m=25):
    normals = rng.normal(size=(m, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return GroundTruthPatch(rng.uniform(-0.5, 0.5, (m, 3)), normals)


def _plane_gt(rng, m=30, z=0.0):
    points = np.column_stack([rng.uniform(-1, 1, (m, 2)), np.full(m, z)])
    return GroundTruthPatch(points, np.tile([0.0, 0.0, 1.0], (m, 1)))


def _scalar_projection(p, gt, cfg):
    """Direct evaluation of the weighted projection distance, term by term."""
    eps = 4.0 * math.sqrt(gt.dobb / gt.m)
    nearest = min(range(gt.m), key=lambda j: float(np.sum((p - gt.gt_points[j]) ** 2)))
    n_p = gt.gt_normals[nearest]
    num = den = 0.0
    for pj, nj in zip(gt.gt_points, gt.gt_normals):
        phi = math.exp(-float(np.sum((p - pj) ** 2)) / eps ** 2)
        theta = math.exp(-(1.0 - float(n_p @ nj)) / (1.0 - math.cos(math.radians(cfg.support_angle_deg))))
        num += abs(float((p - pj) @ nj)) * phi * theta
        den += phi * theta
    return num / den


def _scalar_repulsion(p, gt):
    return max(float(np.linalg.norm(p - pj)) for pj in gt.gt_points)


def test_support_denominator():
    assert LossConfig().support_denominator == pytest.approx(0.0340742, abs=1e-7)


def test_single_point_projection_is_one():
    gt = GroundTruthPatch([[0.0, 0.0, 1.0]], [[0.0, 0.0, 1.0]], dobb=1.0)
    value, _ = projection_terms(np.zeros(3), gt)
    assert value == pytest.approx(1.0, abs=1e-15)


def test_coplanar_projection_is_zero(rng):
    gt = _plane_gt(rng, z=1.0)
    for _ in range(5):
        p = np.array([*rng.uniform(-1, 1, 2), 1.0])
        assert projection_terms(p, gt)[0] == 0.0


def test_degenerate_patch_rejected():
    gt = GroundTruthPatch([[0.0, 0.0, 1.0]], [[0.0, 0.0, 1.0]])
    assert gt.dobb == 0.0
    with pytest.raises(LossError, match="degenerate ground-truth patch"):
        projection_terms(np.zeros(3), gt)


def test_projection_weights_normalize(rng):
    gt = _random_gt(rng)
    p = rng.uniform(-0.3, 0.3, 3)
    w = projection_weights(p, gt)
    residual = np.abs(np.einsum("ij,ij->i", p - gt.gt_points, gt.gt_normals))
    assert projection_terms(p, gt)[0] == pytest.approx(float(residual @ w / w.sum()), abs=1e-12)


def test_projection_matches_scalar_evaluation(rng):
    cfg = LossConfig()
    for _ in range(5):
        gt = _random_gt(rng)
        p = rng.uniform(-0.3, 0.3, 3)
        assert projection_terms(p, gt, cfg)[0] == pytest.approx(_scalar_projection(p, gt, cfg), abs=1e-12)


def test_projection_gradient_matches_finite_differences(rng):
    gt = _random_gt(rng)
    p = rng.uniform(-0.3, 0.3, 3)
    _, grad = projection_terms(p, gt)
    h = 1e-6
    numeric = np.array([
        (projection_terms(p + h * e, gt)[0] - projection_terms(p - h * e, gt)[0]) / (2 * h)
        for e in np.eye(3)
    ])
    assert np.max(np.abs(grad - numeric)) / np.max(np.abs(grad)) < 1e-6


def test_repulsion_examples():
    gt = GroundTruthPatch([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]], [[0, 0, 1.0], [0, 0, 1.0]])
    assert repulsion_terms(np.zeros(3), gt)[0] == 2.0
    single = GroundTruthPatch([[0.3, 0.2, 0.1]], [[0, 0, 1.0]])
    value, grad = repulsion_terms(np.array([0.3, 0.2, 0.1]), single)
    assert value == 0.0 and np.all(grad == 0.0)


def test_repulsion_matches_exhaustive_max(rng):
    for _ in range(10):
        gt = _random_gt(rng)
        p = rng.normal(size=3)
        assert repulsion_terms(p, gt)[0] == pytest.approx(_scalar_repulsion(p, gt), abs=1e-15)


def test_repulsion_tie_goes_to_lowest_index():
    gt = GroundTruthPatch([[1.0, 0, 0], [0, 1.0, 0]], [[0, 0, 1.0], [0, 0, 1.0]])
    _, grad = repulsion_terms(np.zeros(3), gt)
    assert np.allclose(grad, [-1.0, 0.0, 0.0])


def test_patch_loss_alpha_extremes(rng):
    gts = [_random_gt(rng), _random_gt(rng)]
    p = rng.uniform(-0.2, 0.2, (2, 3))
    tape = Tape()
    ls = projection_loss(tape.constant(p), gts).data
    lr = repulsion_loss(tape.constant(p), gts).data
    assert patch_loss(tape.constant(p), gts, LossConfig(alpha=1.0)).data == pytest.approx(ls, abs=1e-15)
    assert patch_loss(tape.constant(p), gts, LossConfig(alpha=0.0)).data == pytest.approx(lr, abs=1e-15)
    mixed = patch_loss(tape.constant(p), gts).data
    assert mixed == pytest.approx(0.97 * ls + 0.03 * lr, abs=1e-15)


def test_scale_equivariance(rng):
    gt = _plane_gt(rng)
    p = np.array([0.1, -0.2, 0.3])
    ls, lr = projection_terms(p, gt)[0], repulsion_terms(p, gt)[0]
    for s in (0.5, 2.0):
        scaled = GroundTruthPatch(gt.gt_points * s, gt.gt_normals)
        assert scaled.dobb == pytest.approx(gt.dobb * s)
        assert projection_terms(p * s, scaled)[0] == pytest.approx(s * ls, rel=1e-12)
        assert repulsion_terms(p * s, scaled)[0] == pytest.approx(s * lr, rel=1e-12)


def _fake_output(tape, pre, dp):
    return ForwardOutput(tape, [], [], None, [tape.constant(x) for x in pre], [], tape.constant(dp))


def test_total_loss_matches_scalar_rederivation(rng):
    cfg = LossConfig()
    pre = [rng.uniform(-0.2, 0.2, (2, 3)) for _ in range(3)]
    dp = rng.uniform(-0.2, 0.2, (2, 3))
    gt_scales = [[_random_gt(rng), _random_gt(rng)] for _ in range(3)]
    gt_final = [_random_gt(rng, 40), _random_gt(rng, 40)]

    br, total = total_loss(_fake_output(Tape(), pre, dp), gt_scales, gt_final, cfg)

    def lp(points, gts):
        return sum(cfg.alpha * _scalar_projection(x, g, cfg) + (1 - cfg.alpha) * _scalar_repulsion(x, g)
                   for x, g in zip(points, gts)) / len(gts)

    l_dp = sum(lp(pre[k], gt_scales[k]) for k in range(3))
    l_final = lp(dp, gt_final)
    assert br.L_dp == pytest.approx(l_dp, abs=1e-10)
    assert br.L_final == pytest.approx(l_final, abs=1e-10)
    assert float(total.data) == pytest.approx(cfg.beta * l_dp + l_final, abs=1e-10)
    assert br.L_total == float(total.data)
    assert all(v >= 0 for v in br.log_row())


def test_beta_zero_gives_final_loss_only(rng):
    pre = [rng.uniform(-0.2, 0.2, (2, 3)) for _ in range(3)]
    dp = rng.uniform(-0.2, 0.2, (2, 3))
    gt_scales = [[_random_gt(rng), _random_gt(rng)] for _ in range(3)]
    gt_final = [_random_gt(rng), _random_gt(rng)]
    br, total = total_loss(_fake_output(Tape(), pre, dp), gt_scales, gt_final, LossConfig(beta=0.0))
    assert float(total.data) == br.L_final


def test_total_loss_gradient_wrt_dp(rng):
    pre = [rng.uniform(-0.2, 0.2, (2, 3)) for _ in range(3)]
    dp = rng.uniform(-0.2, 0.2, (2, 3))
    gt_scales = [[_random_gt(rng), _random_gt(rng)] for _ in range(3)]
    gt_final = [_random_gt(rng), _random_gt(rng)]

    def value(x):
        return float(total_loss(_fake_output(Tape(), pre, x), gt_scales, gt_final)[1].data)

    tape = Tape()
    param = Parameter("dp", dp.copy())
    out = ForwardOutput(tape, [], [], None, [tape.constant(x) for x in pre], [], tape.watch(param))
    tape.backward(total_loss(out, gt_scales, gt_final)[1])

    h = 1e-6
    numeric = np.zeros_like(dp)
    for idx in np.ndindex(*dp.shape):
        up, down = dp.copy(), dp.copy()
        up[idx] += h
        down[idx] -= h
        numeric[idx] = (value(up) - value(down)) / (2 * h)
    assert np.max(np.abs(param.grad - numeric)) / np.max(np.abs(numeric)) < 1e-6


def test_loss_config_validation():
    with pytest.raises(LossError):
        LossConfig(alpha=1.5)
    with pytest.raises(LossError):
        LossConfig(beta=-0.1)
    with pytest.raises(LossError):
        LossConfig(support_angle_deg=0.0)
