"""MODNet CLI — Finite-difference verification of every differentiable op and the full network."""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from modnet_cli import autodiff as ad
from modnet_cli import loss as losses
from modnet_cli.error_reporter import UsageError, VerificationError
from modnet_cli.geom import GroundTruthPatch
from modnet_cli.model import N_SCALES, ModelDims, ModNetParams, modnet_forward

OP_TOL = 1e-6
BN_TOL = 1e-5
E2E_TOL = 1e-4
OP_STEP = 1e-6
E2E_STEP = 1e-6
GRAD_FLOOR = 1e-12

# Reduced widths keep the default end-to-end run short; --full uses ModelDims().
SMALL_DIMS = ModelDims(encoder_widths=(8, 16), fuse_width=16, weight_hidden=8, decoder_widths=(8,))


@dataclass
class OpCase:
    """Random inputs plus a function of the tape and input tensors."""

    build: Callable[[np.random.Generator], Tuple[List[np.ndarray], Callable]]
    tol: float = OP_TOL


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err)) and self.max_rel_err < self.tol

    def line(self) -> str:
        mark = "✅" if self.passed else "❌"
        return f"  {mark} {self.name:<24} max rel err {self.max_rel_err:.3e}  (tol {self.tol:g})"


@dataclass
class GradcheckReport:
    results: List[CheckResult] = field(default_factory=list)

    @property
    def failures(self) -> List[CheckResult]:
        return [r for r in self.results if not r.passed]

    def raise_for_failures(self):
        bad = self.failures
        if bad:
            names = ", ".join(r.name for r in bad)
            raise VerificationError(f"{len(bad)} gradient check(s) failed: {names}")


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), GRAD_FLOOR)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


# ── Per-op cases ─────────────────────────────────────────

def _away_from_zero(x, gap=0.1):
    return np.sign(x) * (np.abs(x) + gap)


def _gt_patch(rng, m=16):
    normals = rng.normal(size=(m, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return GroundTruthPatch(rng.uniform(-0.5, 0.5, (m, 3)), normals)


def _fresh_bn(width):
    return ad.BatchNormState(
        ad.Parameter("running_mean", np.zeros(width), trainable=False),
        ad.Parameter("running_var", np.ones(width), trainable=False),
    )


def _sizes(rng, count, low=2, high=5):
    """Fresh small dimensions per trial so shape-dependent backward bugs surface."""
    return [int(s) for s in rng.integers(low, high + 1, count)]


def _case_linear(rng):
    b, i, o = _sizes(rng, 3)
    return [rng.normal(size=(b, i)), rng.normal(size=(i, o)), rng.normal(size=o)], \
        lambda tape, x, W, bias: ad.linear(x, W, bias)


def _case_batchnorm_train(rng):
    rows, width = _sizes(rng, 1, 5, 8) + _sizes(rng, 1)
    return [rng.normal(size=(rows, width)), rng.normal(size=width), rng.normal(size=width)], \
        lambda tape, x, g, b: ad.batchnorm(x, g, b, _fresh_bn(width), "train")


def _case_batchnorm_eval(rng):
    rows, width = _sizes(rng, 2)
    state = ad.BatchNormState(
        ad.Parameter("running_mean", rng.normal(size=width), trainable=False),
        ad.Parameter("running_var", rng.uniform(0.5, 2.0, width), trainable=False),
    )
    inputs = [rng.normal(size=(rows, width)), rng.normal(size=width), rng.normal(size=width)]
    return inputs, lambda tape, x, g, b: ad.batchnorm(x, g, b, state, "eval")


def _case_activation(kind):
    def build(rng):
        x = rng.normal(size=tuple(_sizes(rng, 2)))
        if kind == "relu":
            x = _away_from_zero(x)
        return [x], lambda tape, t: ad.activation(t, kind)
    return build


def _case_softmax(rng):
    b, c = _sizes(rng, 2)
    return [rng.normal(size=(b, 3, c))], lambda tape, x: ad.softmax_axis(x, axis=2)


def _case_maxpool(rng):
    batch, points, feat = _sizes(rng, 3)
    spaced = np.stack([rng.permutation(points) for _ in range(batch * feat)]) * 0.1
    x = spaced.reshape(batch, feat, points).transpose(0, 2, 1) + rng.uniform(0, 0.01, (batch, points, feat))
    return [x], lambda tape, t: ad.maxpool_points(t)


def _case_concat(rng):
    rows, left, right = _sizes(rng, 3)
    return [rng.normal(size=(rows, left)), rng.normal(size=(rows, right))], \
        lambda tape, a, b: ad.combine("concat_lastaxis", (a, b))


def _case_mul(per_feature):
    def build(rng):
        rows, width = _sizes(rng, 2)
        other = rng.normal(size=width if per_feature else (rows, width))
        return [rng.normal(size=(rows, width)), other], lambda tape, a, b: ad.combine("elementwise_mul", (a, b))
    return build


def _case_reshape(rng):
    a, b, c = _sizes(rng, 3)
    return [rng.normal(size=(a, b * c))], lambda tape, x: ad.reshape(x, (a * b, c))


def _case_transpose(rng):
    return [rng.normal(size=tuple(_sizes(rng, 3)))], lambda tape, x: ad.transpose(x, (0, 2, 1))


def _case_take(rng):
    a, b = _sizes(rng, 2)
    index = int(rng.integers(3))
    return [rng.normal(size=(a, b, 3))], lambda tape, x: ad.take(x, 2, index)


def _case_add(rng):
    shape = tuple(_sizes(rng, 2))
    return [rng.normal(size=shape), rng.normal(size=shape)], lambda tape, a, b: ad.add(a, b)


def _case_scale(rng):
    factor = float(rng.uniform(-2.0, 2.0))
    return [rng.normal(size=tuple(_sizes(rng, 2)))], lambda tape, x: ad.scale(x, factor)


def _case_reduce(kind):
    def build(rng):
        return [rng.normal(size=tuple(_sizes(rng, 2)))], lambda tape, x: ad.reduce(x, kind)
    return build


def _case_patch_loss(fn):
    def build(rng):
        batch = _sizes(rng, 1, 2, 4)[0]
        gts = [_gt_patch(rng, _sizes(rng, 1, 8, 20)[0]) for _ in range(batch)]
        return [rng.uniform(-0.2, 0.2, (batch, 3))], lambda tape, p: fn(p, gts)
    return build


OP_CASES: Dict[str, OpCase] = {
    "linear": OpCase(_case_linear),
    "batchnorm[train]": OpCase(_case_batchnorm_train, tol=BN_TOL),
    "batchnorm[eval]": OpCase(_case_batchnorm_eval, tol=BN_TOL),
    "relu": OpCase(_case_activation("relu")),
    "sigmoid": OpCase(_case_activation("sigmoid")),
    "tanh": OpCase(_case_activation("tanh")),
    "softmax": OpCase(_case_softmax),
    "maxpool_points": OpCase(_case_maxpool),
    "concat_lastaxis": OpCase(_case_concat),
    "elementwise_mul": OpCase(_case_mul(per_feature=False)),
    "elementwise_mul[feature]": OpCase(_case_mul(per_feature=True)),
    "reshape": OpCase(_case_reshape),
    "transpose": OpCase(_case_transpose),
    "take": OpCase(_case_take),
    "add": OpCase(_case_add),
    "scale": OpCase(_case_scale),
    "sum": OpCase(_case_reduce("sum")),
    "mean": OpCase(_case_reduce("mean")),
    "projection_loss": OpCase(_case_patch_loss(losses.projection_loss)),
    "repulsion_loss": OpCase(_case_patch_loss(losses.repulsion_loss)),
}


def _projected(out: np.ndarray, proj: np.ndarray) -> float:
    return float(np.sum(out * proj))


def check_op(name: str, case: OpCase, seed: int = 0, step: float = OP_STEP) -> CheckResult:
    """Compare tape gradients of sum(c * op(inputs)) with central differences."""
    rng = np.random.default_rng(seed)
    arrays, fn = case.build(rng)

    tape = ad.Tape()
    params = [ad.Parameter(f"in{i}", a.copy()) for i, a in enumerate(arrays)]
    out = fn(tape, *[tape.watch(p) for p in params])
    proj = rng.normal(size=out.shape)
    tape.backward(ad.reduce(ad.combine("elementwise_mul", (out, tape.constant(proj))), "sum"))

    def value(values):
        t = ad.Tape(record=False)
        return _projected(fn(t, *[t.constant(v) for v in values]).data, proj)

    worst = 0.0
    for i, p in enumerate(params):
        numeric = np.zeros_like(p.value)
        values = [a.copy() for a in arrays]
        for j in np.ndindex(*p.shape):
            orig = values[i][j]
            values[i][j] = orig + step
            up = value(values)
            values[i][j] = orig - step
            down = value(values)
            values[i][j] = orig
            numeric[j] = (up - down) / (2 * step)
        worst = max(worst, rel_error(p.grad, numeric))
    return CheckResult(name, worst, case.tol)


def run_op_checks(seed: int = 0, only: Optional[Sequence[str]] = None,
                  cases: Optional[Dict[str, OpCase]] = None, trials: int = 1) -> List[CheckResult]:
    """One result per op: the worst of ``trials`` draws, each with its own shapes and values."""
    if trials < 1:
        raise UsageError(f"trials must be at least 1, got {trials}")
    cases = OP_CASES if cases is None else cases
    names = list(cases) if only is None else list(only)
    results = []
    for n in names:
        worst = max((check_op(n, cases[n], seed + t) for t in range(trials)),
                    key=lambda r: r.max_rel_err if np.isfinite(r.max_rel_err) else np.inf)
        results.append(worst)
    return results


# ── End to end ───────────────────────────────────────────

def _random_batch(rng, batch: int, n_points: int):
    patches = [rng.uniform(-1.0, 1.0, (batch, n_points, 3)) for _ in range(N_SCALES)]
    gt_scales = [[_gt_patch(rng, 12) for _ in range(batch)] for _ in range(N_SCALES)]
    gt_final = [_gt_patch(rng, 12) for _ in range(batch)]
    return patches, gt_scales, gt_final


def check_end_to_end(dims: ModelDims = SMALL_DIMS, seed: int = 0, batch: int = 3, n_points: int = 8,
                     coords_per_tensor: int = 20, cfg: losses.LossConfig = losses.LossConfig(),
                     step: float = E2E_STEP) -> CheckResult:
    """Every trainable gradient of the total loss against central differences at sampled coordinates."""
    rng = np.random.default_rng(seed)
    params = ModNetParams.init(dims, seed)
    patches, gt_scales, gt_final = _random_batch(rng, batch, n_points)
    saved = params.snapshot()

    def total(record=False):
        out = modnet_forward(patches, params, "train", tape=ad.Tape(record=record))
        return out, losses.total_loss(out, gt_scales, gt_final, cfg)[1]

    params.zero_grad()
    out, loss = total(record=True)
    out.tape.backward(loss)

    worst = 0.0
    try:
        for p in params.trainable():
            flat = p.value.reshape(-1)
            picks = rng.choice(flat.size, size=min(coords_per_tensor, flat.size), replace=False)
            analytic = p.grad.reshape(-1)[picks]
            numeric = np.empty(len(picks))
            for n, j in enumerate(picks):
                base = p.value.copy()
                bumped = base.reshape(-1)
                bumped[j] += step
                p.value = base
                up = float(total()[1].data)
                bumped[j] -= 2 * step
                down = float(total()[1].data)
                bumped[j] += step
                numeric[n] = (up - down) / (2 * step)
            scale = max(float(np.max(np.abs(p.grad))), float(np.max(np.abs(numeric))), GRAD_FLOOR)
            worst = max(worst, float(np.max(np.abs(analytic - numeric))) / scale)
    finally:
        params.restore(saved)
        params.zero_grad()
    return CheckResult(f"end_to_end[seed={seed}]", worst, E2E_TOL)


def run_gradcheck(full: bool = False, seed: int = 0, batches: int = 5, coords_per_tensor: int = 20,
                  trials: int = 1, log: Callable[[str], None] = print) -> GradcheckReport:
    report = GradcheckReport()
    log(f"🔍 Per-op finite-difference checks ({trials} random draw(s) per op)\n")
    for result in run_op_checks(seed, trials=trials):
        report.results.append(result)
        log(result.line())

    dims = ModelDims() if full else SMALL_DIMS
    log(f"\n🔍 End-to-end check ({'full' if full else 'reduced'} widths, {batches} mini-batch(es))\n")
    for b in range(batches):
        result = check_end_to_end(dims, seed + b, batch=2 if full else 3,
                                  n_points=16 if full else 8, coords_per_tensor=coords_per_tensor)
        report.results.append(result)
        log(result.line())

    log("")
    bad = report.failures
    if bad:
        log(f"⚠️  {len(bad)} issue(s) found:")
        for r in bad:
            log(f"   ❌ {r.name}")
    else:
        log("✅ All gradient checks passed.")
    return report


def handle_gradcheck(args):
    report = run_gradcheck(full=getattr(args, "full", False), seed=args.seed or 0,
                           batches=getattr(args, "batches", 5), trials=getattr(args, "trials", 1))
    report.raise_for_failures()
