"""MODNet CLI — Patch feature encoders, multi-scale perception and multi-offset decoding."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from modnet_cli.autodiff import (
    BatchNormState,
    Parameter,
    Tape,
    Tensor,
    activation,
    add,
    batchnorm,
    combine,
    linear,
    maxpool_points,
    reshape,
    softmax_axis,
    take,
    transpose,
)
from modnet_cli.error_reporter import AutodiffError, IsolatedPointError
from modnet_cli.geom import (
    DEFAULT_N_PATCH,
    DEFAULT_RADII,
    MultiScalePatch,
    PointCloud,
    build_index,
    extract_multiscale_patch,
    patch_rng,
)

N_SCALES = 3
AXES = 3


@dataclass(frozen=True)
class ModelDims:
    """Dimension table. Defaults give the 1536-wide fused feature."""

    encoder_widths: Tuple[int, ...] = (64, 128, 256, 512)
    fuse_width: int = 512
    weight_hidden: int = 256
    decoder_widths: Tuple[int, ...] = (256, 128)

    @property
    def feature_width(self) -> int:
        return self.encoder_widths[-1]

    def table(self) -> Dict[str, object]:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["decoder_widths"] = list(self.decoder_widths)
        return d

    @classmethod
    def from_config(cls, cfg) -> "ModelDims":
        return cls(
            encoder_widths=tuple(cfg["encoder_widths"]),
            fuse_width=cfg["fuse_width"],
            weight_hidden=cfg["weight_hidden"],
            decoder_widths=tuple(cfg["decoder_widths"]),
        )

    def to_vector(self) -> np.ndarray:
        return np.array(
            [len(self.encoder_widths), *self.encoder_widths, self.fuse_width, self.weight_hidden,
             len(self.decoder_widths), *self.decoder_widths],
            dtype=np.float64,
        )

    @classmethod
    def from_vector(cls, vec) -> "ModelDims":
        v = [int(x) for x in vec]
        ne = v[0]
        enc = tuple(v[1:1 + ne])
        fuse, hidden, nd = v[1 + ne], v[2 + ne], v[3 + ne]
        dec = tuple(v[4 + ne:4 + ne + nd])
        return cls(enc, fuse, hidden, dec)


def _layer_shapes(dims: ModelDims) -> List[Tuple[str, Tuple[int, int]]]:
    """(name, (fan_in, fan_out)) for every dense layer, in a fixed order."""
    layers = []
    for k in range(1, N_SCALES + 1):
        widths = (AXES,) + tuple(dims.encoder_widths)
        for l, (a, b) in enumerate(zip(widths, widths[1:])):
            layers.append((f"pfe{k}.mlp{l}", (a, b)))
    f = dims.feature_width
    layers.append(("mspm.fc1", (N_SCALES * f, dims.fuse_width)))
    for k in range(1, N_SCALES + 1):
        layers.append((f"mspm.fc2_{k}", (dims.fuse_width, f)))
    layers.append(("mspm.fcw1", (dims.fuse_width, dims.weight_hidden)))
    layers.append(("mspm.fcw2", (dims.weight_hidden, N_SCALES * AXES)))
    for k in range(1, N_SCALES + 1):
        widths = (f,) + tuple(dims.decoder_widths)
        for l, (a, b) in enumerate(zip(widths, widths[1:])):
            layers.append((f"mod{k}.dc1_{l}", (a, b)))
        layers.append((f"mod{k}.dc2", (widths[-1], AXES)))
        layers.append((f"mod{k}.dc3", (widths[-1], AXES)))
    return layers


class ModNetParams:
    """All learnable weights plus batch-norm running statistics, keyed by name."""

    def __init__(self, dims: ModelDims, params: Dict[str, Parameter]):
        self.dims = dims
        self.params = params

    @classmethod
    def init(cls, dims: ModelDims = ModelDims(), seed: int = 0) -> "ModNetParams":
        rng = np.random.default_rng(seed)
        params: Dict[str, Parameter] = {}
        for name, (fan_in, fan_out) in _layer_shapes(dims):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[f"{name}.W"] = Parameter(f"{name}.W", rng.uniform(-limit, limit, (fan_in, fan_out)))
            params[f"{name}.b"] = Parameter(f"{name}.b", np.zeros(fan_out))
            if name.startswith("pfe"):
                bn = name.replace(".mlp", ".bn")
                params[f"{bn}.gamma"] = Parameter(f"{bn}.gamma", np.ones(fan_out))
                params[f"{bn}.beta"] = Parameter(f"{bn}.beta", np.zeros(fan_out))
                params[f"{bn}.running_mean"] = Parameter(f"{bn}.running_mean", np.zeros(fan_out), trainable=False)
                params[f"{bn}.running_var"] = Parameter(f"{bn}.running_var", np.ones(fan_out), trainable=False)
        return cls(dims, params)

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.values())

    def names(self) -> List[str]:
        return list(self.params)

    def trainable(self) -> List[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def bn_state(self, prefix: str) -> BatchNormState:
        return BatchNormState(self.params[f"{prefix}.running_mean"], self.params[f"{prefix}.running_var"])

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.params.items()}

    def restore(self, values: Dict[str, np.ndarray]):
        for name, value in values.items():
            self.params[name].value = value.copy()

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def zero_displacement(params: ModNetParams):
    """Zero both offset heads so every pre-offset, offset and dp is exactly 0."""
    for k in range(1, N_SCALES + 1):
        for head in ("dc2", "dc3"):
            for part in ("W", "b"):
                p = params[f"mod{k}.{head}.{part}"]
                p.value = np.zeros_like(p.value)


@dataclass
class ForwardOutput:
    tape: Tape
    low_feats: List[Tensor]
    gated_feats: List[Tensor]
    weights: Tensor
    pre_offsets: List[Tensor]
    offsets: List[Tensor]
    dp: Tensor


def _dense(tape: Tape, params: ModNetParams, name: str, x: Tensor) -> Tensor:
    return linear(x, tape.watch(params[f"{name}.W"]), tape.watch(params[f"{name}.b"]))


def pfe_forward(patch_k: Tensor, params: ModNetParams, scale: int, mode: str = "train",
                n_points: Optional[int] = None) -> Tensor:
    """Per-point MLP (linear + batchnorm + relu per layer) then max-pool over points."""
    tape = patch_k.tape
    if patch_k.data.ndim != 3 or patch_k.shape[2] != AXES:
        raise AutodiffError(f"pfe{scale}: expected [batch, points, 3], got {patch_k.shape}")
    batch, n, _ = patch_k.shape
    if n_points is not None and n != n_points:
        raise AutodiffError(f"pfe{scale}: expected {n_points} points per patch, got {n}")
    h = reshape(patch_k, (batch * n, AXES))
    for l in range(len(params.dims.encoder_widths)):
        h = _dense(tape, params, f"pfe{scale}.mlp{l}", h)
        bn = f"pfe{scale}.bn{l}"
        h = batchnorm(h, tape.watch(params[f"{bn}.gamma"]), tape.watch(params[f"{bn}.beta"]),
                      params.bn_state(bn), mode)
        h = activation(h, "relu")
    h = reshape(h, (batch, n, params.dims.feature_width))
    return maxpool_points(h)


def mspm_forward(feats: Sequence[Tensor], params: ModNetParams) -> Tuple[List[Tensor], Tensor]:
    """Gate each scale feature by the fused feature; emit [batch, scale, axis] weights."""
    f = params.dims.feature_width
    if len(feats) != N_SCALES or any(t.data.ndim != 2 or t.shape[1] != f for t in feats):
        raise AutodiffError(f"mspm: expected {N_SCALES} features of width {f}, got {[t.shape for t in feats]}")
    tape = feats[0].tape
    fused = combine("concat_lastaxis", feats)
    h = activation(_dense(tape, params, "mspm.fc1", fused), "relu")
    gated = []
    for k, fk in enumerate(feats, start=1):
        gate = activation(_dense(tape, params, f"mspm.fc2_{k}", h), "sigmoid")
        gated.append(combine("elementwise_mul", (fk, gate)))
    w = activation(_dense(tape, params, "mspm.fcw1", h), "relu")
    w9 = _dense(tape, params, "mspm.fcw2", w)
    # rows are axes (x, y, z), columns are scales; normalize over scales per axis
    per_axis = softmax_axis(reshape(w9, (w9.shape[0], AXES, N_SCALES)), axis=2)
    weights = transpose(per_axis, (0, 2, 1))
    return gated, weights


def mod_forward(gated: Sequence[Tensor], weights: Tensor, params: ModNetParams):
    """Per-scale decoders; dp is the per-axis weighted sum of the scale offsets."""
    if weights.data.ndim != 3 or weights.shape[1:] != (N_SCALES, AXES):
        raise AutodiffError(f"mod: weights must be [batch, {N_SCALES}, {AXES}], got {weights.shape}")
    tape = weights.tape
    pre_offsets, offsets = [], []
    dp = None
    for k, fk in enumerate(gated, start=1):
        h = fk
        for l in range(len(params.dims.decoder_widths)):
            h = activation(_dense(tape, params, f"mod{k}.dc1_{l}", h), "relu")
        pre_offsets.append(activation(_dense(tape, params, f"mod{k}.dc2", h), "tanh"))
        offset = activation(_dense(tape, params, f"mod{k}.dc3", h), "tanh")
        offsets.append(offset)
        term = combine("elementwise_mul", (offset, take(weights, 1, k - 1)))
        dp = term if dp is None else add(dp, term)
    return pre_offsets, offsets, dp


def modnet_forward(patches: Sequence, params: ModNetParams, mode: str = "train",
                   tape: Optional[Tape] = None, n_points: Optional[int] = None) -> ForwardOutput:
    """Three encoders -> MSPM -> MOD. ``patches`` holds one [batch, points, 3] array per scale.

    ``n_points``, when given, is the configured patch size every scale must match.
    """
    if len(patches) != N_SCALES:
        raise AutodiffError(f"expected {N_SCALES} scale inputs, got {len(patches)}")
    if tape is None:
        tape = Tape(record=(mode == "train"))
    inputs = [p if isinstance(p, Tensor) else tape.constant(p) for p in patches]
    if any(t.shape != inputs[0].shape for t in inputs):
        raise AutodiffError(f"scale inputs disagree in shape: {[t.shape for t in inputs]}")
    low = [pfe_forward(x, params, k, mode, n_points) for k, x in enumerate(inputs, start=1)]
    gated, weights = mspm_forward(low, params)
    pre_offsets, offsets, dp = mod_forward(gated, weights, params)
    return ForwardOutput(tape, low, gated, weights, pre_offsets, offsets, dp)


def stack_patches(patches: Sequence[MultiScalePatch]) -> List[np.ndarray]:
    return [np.stack([p.scale_points[k] for p in patches]) for k in range(N_SCALES)]


# ── Whole-cloud inference ────────────────────────────────

@dataclass
class DenoiseConfig:
    radii_frac: Tuple[float, ...] = DEFAULT_RADII
    n_patch: int = DEFAULT_N_PATCH
    seed: int = 0
    batch: int = 256
    threads: int = 1


def denoise_cloud(noisy: PointCloud, params: ModNetParams, config: DenoiseConfig = DenoiseConfig(),
                  log: Callable[[str], None] = print) -> Tuple[PointCloud, np.ndarray]:
    """ṗ_i = p̂_i + r_max · Rᵀ · dp_i for every point; also returns per-point [3, 3] weights.

    Isolated points are copied through with uniform weights.
    """
    index = build_index(noisy)
    n = len(noisy)

    def extract(i):
        try:
            return extract_multiscale_patch(noisy, index, i, config.radii_frac, config.n_patch,
                                            patch_rng(config.seed, i))
        except IsolatedPointError:
            return None

    with ThreadPoolExecutor(max_workers=max(1, config.threads)) as pool:
        patches = list(pool.map(extract, range(n)))

    out = noisy.points.copy()
    weights = np.full((n, N_SCALES, AXES), 1.0 / N_SCALES)
    valid = [p for p in patches if p is not None]
    isolated = n - len(valid)
    for start in range(0, len(valid), max(1, config.batch)):
        chunk = valid[start:start + config.batch]
        result = modnet_forward(stack_patches(chunk), params, mode="eval", n_points=config.n_patch)
        dp = result.dp.data
        w = result.weights.data
        for b, patch in enumerate(chunk):
            out[patch.index] = patch.to_model_frame(dp[b])
            weights[patch.index] = w[b]
    if isolated:
        log(f"⚠️  {isolated} isolated point(s) copied through unchanged")
    return PointCloud(out), weights


def write_weights(path, weights: np.ndarray):
    """One line per point: w11 w12 w13 w21 ... w33 (scale-major, axis-minor)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.asarray(weights).reshape(-1, N_SCALES * AXES), fmt="%.17g")


def read_weights(path) -> np.ndarray:
    data = np.loadtxt(path, ndmin=2)
    return data.reshape(-1, N_SCALES, AXES)


def handle_denoise(args):
    from modnet_cli.config_manager import resolve_config
    from modnet_cli.geom import read_xyz, write_xyz
    from modnet_cli.train import load_checkpoint

    cfg = resolve_config(args)
    expected = ModelDims.from_config(cfg) if args.config else None
    params = load_checkpoint(args.checkpoint, expected)
    print(f"\n🧠 Loaded {args.checkpoint} ({len(params.trainable())} trainable tensors)")

    noisy = read_xyz(args.input)
    config = DenoiseConfig(
        radii_frac=tuple(cfg["radii_frac"]),
        n_patch=cfg["n_patch"],
        seed=cfg["seed"],
        batch=args.batch,
        threads=cfg["threads"],
    )
    denoised, weights = denoise_cloud(noisy, params, config)

    out = Path(args.out or "out")
    stem = Path(args.input).stem
    path = out / f"{stem}_denoised.xyz"
    write_xyz(path, denoised, with_normals=False)
    print(f"📦 Wrote {path} ({len(denoised)} points)")
    if args.export_weights:
        wpath = out / f"{stem}_weights.txt"
        write_weights(wpath, weights)
        print(f"📦 Wrote {wpath}")
    print("✅ Denoising complete")
