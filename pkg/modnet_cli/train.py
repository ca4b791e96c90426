"""MODNet CLI — Dataset assembly, the SGD training loop and checkpoint persistence."""

import csv
import hashlib
import json
import queue
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from modnet_cli.autodiff import clip_grad_norm, sgd_step
from modnet_cli.error_reporter import (
    CheckpointError,
    ConfigError,
    GeometryError,
    NonFiniteError,
    TrainingDivergedError,
)
from modnet_cli.geom import (
    DEFAULT_N_PATCH,
    DEFAULT_RADII,
    GroundTruthPatch,
    MultiScalePatch,
    PointCloud,
    SpatialIndex,
    build_index,
    extract_gt_patch,
    extract_multiscale_patch,
    read_xyz,
    write_xyz,
)
from modnet_cli.loss import LossBreakdown, LossConfig, total_loss
from modnet_cli.model import N_SCALES, ModelDims, ModNetParams, modnet_forward, stack_patches
from modnet_cli.shapes import NoiseSpec, TriMesh, add_noise, gen_shape, read_off, sample_surface, write_off

MANIFEST = "manifest.json"
PREFETCH_DEPTH = 2
LOG_HEADER = ["epoch", "step", "lr", *LossBreakdown.LOG_COLUMNS]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 32
    lr_start: float = 1e-4
    lr_end: float = 1e-7
    seed: int = 0
    radii_frac: Tuple[float, ...] = DEFAULT_RADII
    n_patch: int = DEFAULT_N_PATCH
    patches_per_shape: int = 256
    grad_clip: float = 5.0
    loss: LossConfig = field(default_factory=LossConfig)
    dims: ModelDims = field(default_factory=ModelDims)
    prefetch: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigError(f"need lr_start >= lr_end > 0, got {self.lr_start} and {self.lr_end}")
        if self.patches_per_shape < 1:
            raise ConfigError("patches_per_shape must be at least 1")
        if len(self.radii_frac) != N_SCALES:
            raise ConfigError(f"radii_frac needs {N_SCALES} values, got {len(self.radii_frac)}")

    @classmethod
    def from_config(cls, cfg: Mapping) -> "TrainConfig":
        """Build from a merged RunConfig mapping (see config_manager.DEFAULT_CONFIG)."""
        return cls(
            epochs=cfg["epochs"],
            batch_size=cfg["batch_size"],
            lr_start=cfg["lr_start"],
            lr_end=cfg["lr_end"],
            seed=cfg["seed"],
            radii_frac=tuple(cfg["radii_frac"]),
            n_patch=cfg["n_patch"],
            patches_per_shape=cfg["patches_per_shape"],
            grad_clip=cfg["grad_clip"],
            loss=LossConfig(
                alpha=cfg["alpha"],
                beta=cfg["beta"],
                support_angle_deg=cfg["support_angle_deg"],
                m_final=cfg["m_final"],
                r_final_frac=cfg["r_final_frac"],
            ),
            dims=ModelDims.from_config(cfg),
            prefetch=cfg.get("threads", 1) > 0,
        )


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Geometric decay from lr_start at epoch 0 to lr_end at the last epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.epochs == 1 or epoch == 0:
        return cfg.lr_start
    if epoch == cfg.epochs - 1:
        return cfg.lr_end
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** (epoch / (cfg.epochs - 1))


# ── Dataset ──────────────────────────────────────────────

@dataclass
class DatasetEntry:
    name: str
    kind: str
    clean: PointCloud
    mesh: Optional[TriMesh]
    noise: List[NoiseSpec]
    noisy: List[PointCloud]

    def __post_init__(self):
        if self.clean.normals is None:
            raise GeometryError(f"{self.name}: clean cloud needs normals")
        if len(self.noise) != len(self.noisy):
            raise GeometryError(f"{self.name}: {len(self.noise)} noise specs for {len(self.noisy)} clouds")
        for spec, cloud in zip(self.noise, self.noisy):
            if len(cloud) != len(self.clean):
                raise GeometryError(
                    f"{self.name}: noisy cloud {spec.tag} has {len(cloud)} points, clean has {len(self.clean)}"
                )


@dataclass
class Dataset:
    entries: List[DatasetEntry]
    split: str = "train"
    _indexes: Dict[Tuple[int, int], SpatialIndex] = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.entries)

    def index(self, entry: int, level: int) -> SpatialIndex:
        """kd-tree over a noisy cloud (level >= 0) or the clean cloud (level == -1)."""
        key = (entry, level)
        if key not in self._indexes:
            e = self.entries[entry]
            self._indexes[key] = build_index(e.clean if level < 0 else e.noisy[level])
        return self._indexes[key]


def _noise_seed(seed: int, noise_seed: int, shape: int, level: int) -> int:
    return int(np.random.SeedSequence([seed, noise_seed, shape, level]).generate_state(1)[0])


def build_dataset(kinds: Sequence[str], noise: Sequence[NoiseSpec], points: int = 2000, seed: int = 0,
                  resolution: int = 8, params: Optional[Mapping[str, Mapping[str, float]]] = None,
                  split: str = "train") -> Dataset:
    if not kinds:
        raise ConfigError("no shapes given")
    if not noise:
        raise ConfigError("no noise levels given")
    params = params or {}
    entries = []
    for s, kind in enumerate(kinds):
        mesh = gen_shape(kind, params.get(kind), resolution)
        clean = sample_surface(mesh, points, np.random.default_rng([seed, s]))
        specs = [NoiseSpec(n.model, n.sigma_frac, _noise_seed(seed, n.seed, s, l))
                 for l, n in enumerate(noise)]
        noisy = [add_noise(clean, spec) for spec in specs]
        entries.append(DatasetEntry(f"{s:02d}_{kind}", kind, clean, mesh, specs, noisy))
    return Dataset(entries, split)


def write_dataset(dataset: Dataset, out_dir, seed: int = 0) -> Path:
    """Clean XYZN, noisy XYZ and mesh OFF files plus a JSON manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for e in dataset.entries:
        clean_file = f"{e.name}_clean.xyz"
        write_xyz(out_dir / clean_file, e.clean, with_normals=True)
        mesh_file = None
        if e.mesh is not None:
            mesh_file = f"{e.name}.off"
            write_off(out_dir / mesh_file, e.mesh)
        noisy = []
        for spec, cloud in zip(e.noise, e.noisy):
            name = f"{e.name}_{spec.tag}.xyz"
            write_xyz(out_dir / name, cloud, with_normals=False)
            noisy.append({"file": name, "model": spec.model, "sigma_frac": spec.sigma_frac, "seed": spec.seed})
        records.append({
            "name": e.name,
            "shape": e.kind,
            "n_points": len(e.clean),
            "clean": clean_file,
            "mesh": mesh_file,
            "noisy": noisy,
        })
    manifest = {"split": dataset.split, "seed": seed, "entries": records}
    path = out_dir / MANIFEST
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
    return path


def load_dataset(manifest_dir) -> Dataset:
    root = Path(manifest_dir)
    path = root / MANIFEST if root.is_dir() else root
    root = path.parent
    try:
        with open(path) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise GeometryError(f"cannot read manifest {path}: {e}") from e
    entries = []
    for rec in manifest.get("entries", []):
        specs = [NoiseSpec(n["model"], float(n["sigma_frac"]), int(n["seed"])) for n in rec["noisy"]]
        entries.append(DatasetEntry(
            name=rec["name"],
            kind=rec.get("shape", rec["name"]),
            clean=read_xyz(root / rec["clean"]),
            mesh=read_off(root / rec["mesh"]) if rec.get("mesh") else None,
            noise=specs,
            noisy=[read_xyz(root / n["file"]) for n in rec["noisy"]],
        ))
    if not entries:
        raise GeometryError(f"{path}: manifest lists no shapes")
    return Dataset(entries, manifest.get("split", "train"))


# ── Batches ──────────────────────────────────────────────

@dataclass(frozen=True)
class Sample:
    epoch: int
    entry: int
    level: int
    point: int


@dataclass
class Batch:
    patches: List[MultiScalePatch]
    inputs: List[np.ndarray]
    gt_per_scale: List[List[GroundTruthPatch]]
    gt_final: List[GroundTruthPatch]
    skipped: int = 0

    def __len__(self):
        return len(self.patches)


def epoch_samples(dataset: Dataset, cfg: TrainConfig, epoch: int) -> List[Sample]:
    """Patch centers for one epoch, drawn from a fresh stream per (epoch, shape), then shuffled."""
    samples = []
    for s, entry in enumerate(dataset.entries):
        rng = np.random.default_rng([cfg.seed, epoch, s])
        levels = rng.integers(0, len(entry.noisy), cfg.patches_per_shape)
        points = rng.integers(0, len(entry.clean), cfg.patches_per_shape)
        samples.extend(Sample(epoch, s, int(l), int(p)) for l, p in zip(levels, points))
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
    return [samples[i] for i in order]


def prepare_batch(dataset: Dataset, samples: Sequence[Sample], cfg: TrainConfig) -> Batch:
    """Multi-scale patches plus per-scale and final ground-truth patches.

    Samples whose patch is isolated or whose center has no clean support are skipped.
    """
    patches, gt_scales, gt_final = [], [[] for _ in range(N_SCALES)], []
    skipped = 0
    for smp in samples:
        entry = dataset.entries[smp.entry]
        noisy = entry.noisy[smp.level]
        rng = np.random.default_rng([cfg.seed, smp.epoch, smp.entry, smp.level, smp.point])
        try:
            patch = extract_multiscale_patch(noisy, dataset.index(smp.entry, smp.level), smp.point,
                                             cfg.radii_frac, cfg.n_patch, rng)
            center = noisy.points[smp.point]
            clean_index = dataset.index(smp.entry, -1)
            per_scale = [extract_gt_patch(entry.clean, center, patch, r, cfg.n_patch, rng, clean_index)
                         for r in cfg.radii_frac]
            final = extract_gt_patch(entry.clean, center, patch, cfg.loss.r_final_frac, cfg.loss.m_final,
                                     rng, clean_index)
        except GeometryError:
            skipped += 1
            continue
        if any(g.dobb <= 0 for g in (*per_scale, final)):
            skipped += 1
            continue
        patches.append(patch)
        for k in range(N_SCALES):
            gt_scales[k].append(per_scale[k])
        gt_final.append(final)
    inputs = stack_patches(patches) if patches else []
    return Batch(patches, inputs, gt_scales, gt_final, skipped)


def train_step(params: ModNetParams, batch: Batch, cfg: TrainConfig, lr: float) -> LossBreakdown:
    """Forward, total loss, backward, optional clip and one SGD update. Returns the pre-update losses."""
    try:
        out = modnet_forward(batch.inputs, params, mode="train", n_points=cfg.n_patch)
        breakdown, total = total_loss(out, batch.gt_per_scale, batch.gt_final, cfg.loss)
        out.tape.backward(total)
    except NonFiniteError as e:
        params.zero_grad()
        raise TrainingDivergedError(f"non-finite value in op '{e.op}'") from e
    if not breakdown.is_finite():
        params.zero_grad()
        raise TrainingDivergedError(f"non-finite loss: {breakdown}")
    trainable = params.trainable()
    if cfg.grad_clip > 0:
        clip_grad_norm(trainable, cfg.grad_clip)
    sgd_step(trainable, lr)
    return breakdown


def _batched(samples: Sequence[Sample], size: int) -> Iterator[Sequence[Sample]]:
    for start in range(0, len(samples), size):
        yield samples[start:start + size]


def _prefetched(jobs: Iterable, build: Callable, depth: int = PREFETCH_DEPTH) -> Iterator:
    """Run ``build`` over ``jobs`` in one producer thread, ahead of the consumer by at most ``depth``."""
    q: "queue.Queue" = queue.Queue(maxsize=depth)
    done = threading.Event()

    def producer():
        try:
            for job in jobs:
                if done.is_set():
                    return
                q.put(("item", build(job)))
        except BaseException as e:
            q.put(("error", e))
            return
        q.put(("end", None))

    worker = threading.Thread(target=producer, name="modnet-prefetch", daemon=True)
    worker.start()
    try:
        while True:
            kind, item = q.get()
            if kind == "end":
                return
            if kind == "error":
                raise item
            yield item
    finally:
        done.set()
        while worker.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                pass
            worker.join(timeout=0.01)


@dataclass
class EpochResult:
    epoch: int
    lr: float
    mean: LossBreakdown
    steps: int
    skipped: int
    stopped: bool = False


def train_epoch(params: ModNetParams, dataset: Dataset, cfg: TrainConfig, epoch: int,
                on_step: Optional[Callable[[int, float, LossBreakdown], None]] = None,
                should_stop: Optional[Callable[[], bool]] = None) -> EpochResult:
    if len(dataset) == 0:
        raise ConfigError("empty dataset")
    lr = lr_schedule(cfg, epoch)
    samples = epoch_samples(dataset, cfg, epoch)
    build = lambda chunk: prepare_batch(dataset, chunk, cfg)
    jobs = _batched(samples, cfg.batch_size)
    batches = _prefetched(jobs, build) if cfg.prefetch else map(build, jobs)

    rows, skipped, stopped = [], 0, False
    try:
        for batch in batches:
            skipped += batch.skipped
            if len(batch) == 0:
                continue
            breakdown = train_step(params, batch, cfg, lr)
            rows.append(breakdown)
            if on_step is not None:
                on_step(len(rows) - 1, lr, breakdown)
            if should_stop is not None and should_stop():
                stopped = True
                break
    finally:
        if hasattr(batches, "close"):
            batches.close()
    return EpochResult(epoch, lr, LossBreakdown.mean(rows), len(rows), skipped, stopped)


def run_training(params: ModNetParams, dataset: Dataset, cfg: TrainConfig, log_path=None,
                 should_stop: Optional[Callable[[], bool]] = None,
                 log: Callable[[str], None] = print) -> List[EpochResult]:
    """Run every epoch, appending one CSV row per step to ``log_path``.

    ``should_stop`` is polled after each step; when it returns True the loop
    finishes that step and returns.
    """
    results = []
    handle = None
    writer = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        handle = open(log_path, "w", newline="")
        writer = csv.writer(handle)
        writer.writerow(LOG_HEADER)
    step = 0
    try:
        for epoch in range(cfg.epochs):
            def on_step(_, lr, br):
                nonlocal step
                if writer is not None:
                    writer.writerow([epoch, step, f"{lr:.12g}", *(f"{v:.12g}" for v in br.log_row())])
                step += 1

            result = train_epoch(params, dataset, cfg, epoch, on_step, should_stop)
            results.append(result)
            log(f"🧠 epoch {epoch + 1}/{cfg.epochs}  lr={result.lr:.3g}  "
                f"L_total={result.mean.L_total:.6g}  L_final={result.mean.L_final:.6g}  "
                f"steps={result.steps}" + (f"  skipped={result.skipped}" if result.skipped else ""))
            if result.stopped:
                log("🛑 Stop requested, finishing after the current step")
                break
    finally:
        if handle is not None:
            handle.close()
    return results


# ── Checkpoints ──────────────────────────────────────────

MAGIC = b"MODN"
FORMAT_VERSION = 1
DIMS_TENSOR = "__dims__"
_HEADER = struct.Struct("<4sIQI")


def config_digest(dims: ModelDims) -> int:
    blob = json.dumps(dims.table(), sort_keys=True).encode()
    return struct.unpack("<Q", hashlib.sha256(blob).digest()[:8])[0]


def _format_dims(dims: ModelDims) -> str:
    return ", ".join(f"{k}={v}" for k, v in dims.table().items())


def save_checkpoint(params: ModNetParams, path) -> Path:
    tensors = [(DIMS_TENSOR, params.dims.to_vector())]
    tensors += [(p.name, p.value) for p in params]
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, config_digest(params.dims), len(tensors))]
    for name, value in tensors:
        raw = name.encode()
        value = np.ascontiguousarray(value, dtype="<f8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape))
        chunks.append(value.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    return path


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load_checkpoint(path, expected_dims: Optional[ModelDims] = None) -> ModNetParams:
    """Read a whole checkpoint; nothing is built unless every record parses."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    r = _Reader(blob, path)
    magic, version, digest, count = r.unpack(_HEADER.format)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a MODNet checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads version {FORMAT_VERSION}")

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.pos} trailing bytes")
    if DIMS_TENSOR not in tensors:
        raise CheckpointError(f"{path}: missing dimension table")

    dims = ModelDims.from_vector(tensors.pop(DIMS_TENSOR))
    if config_digest(dims) != digest:
        raise CheckpointError(f"{path}: config digest does not match the stored dimension table")
    if expected_dims is not None and expected_dims != dims:
        raise CheckpointError(
            f"{path}: dimension table mismatch\n"
            f"   checkpoint: {_format_dims(dims)}\n"
            f"   config:     {_format_dims(expected_dims)}"
        )
    params = ModNetParams.init(dims)
    if set(tensors) != set(params.names()):
        missing = sorted(set(params.names()) - set(tensors))
        extra = sorted(set(tensors) - set(params.names()))
        raise CheckpointError(f"{path}: tensor names differ (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, value in tensors.items():
        if value.shape != params[name].shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {value.shape}, expected {params[name].shape}")
    params.restore(tensors)
    return params


def checkpoint_io(params: Optional[ModNetParams], path, direction: str = "save",
                  expected_dims: Optional[ModelDims] = None):
    if direction == "save":
        if params is None:
            raise CheckpointError("nothing to save")
        save_checkpoint(params, path)
        return None
    if direction == "load":
        return load_checkpoint(path, expected_dims)
    raise CheckpointError(f"unknown checkpoint direction '{direction}'")


# ── Commands ─────────────────────────────────────────────

def handle_synth(args):
    from modnet_cli.config_manager import resolve_config
    from modnet_cli.shapes import parse_noise_grid

    cfg = resolve_config(args)
    kinds = [k.strip() for k in cfg["shapes"].split(",") if k.strip()]
    noise = parse_noise_grid(cfg["noise"], cfg["seed"])
    out = Path(args.out or "data")
    print(f"\n🧪 Synthesizing {len(kinds)} shape(s) x {len(noise)} noise level(s), {cfg['points']} points each")
    dataset = build_dataset(kinds, noise, cfg["points"], cfg["seed"], cfg["resolution"], split=args.split)
    manifest = write_dataset(dataset, out, cfg["seed"])
    for e in dataset.entries:
        print(f"📦 {e.name}: clean + {len(e.noisy)} noisy + mesh ({len(e.mesh.triangles)} triangles)")
    print(f"✅ Manifest written to {manifest}")


def handle_train(args):
    import signal

    from modnet_cli.config_manager import resolve_config, write_config

    cfg = resolve_config(args)
    tcfg = TrainConfig.from_config(cfg)
    out = Path(args.out or "runs")
    write_config(cfg, out / "config.txt")
    dataset = load_dataset(args.data)
    print(f"\n📦 Loaded {len(dataset)} shape(s) from {args.data}")

    stop = threading.Event()

    def signal_handler(sig, frame):
        print("\n🛑 Stopping after the current step...")
        stop.set()

    previous = signal.signal(signal.SIGINT, signal_handler)
    try:
        params = ModNetParams.init(tcfg.dims, tcfg.seed)
        results = run_training(params, dataset, tcfg, out / "train_log.csv", stop.is_set)
    finally:
        signal.signal(signal.SIGINT, previous)

    path = save_checkpoint(params, out / "model.modn")
    if results and results[0].steps and results[-1].steps:
        print(f"🧠 L_total {results[0].mean.L_total:.6g} -> {results[-1].mean.L_total:.6g}")
    print(f"✅ Checkpoint written to {path}")
