"""MODNet CLI — Run configuration: defaults, key = value files and flag overrides."""

from pathlib import Path

from modnet_cli.error_reporter import ConfigError

DEFAULT_CONFIG = {
    "seed": 0,
    "threads": 1,
    # training
    "epochs": 8,
    "batch_size": 32,
    "lr_start": 1e-4,
    "lr_end": 1e-7,
    "patches_per_shape": 256,
    "grad_clip": 5.0,
    # loss
    "alpha": 0.97,
    "beta": 0.2,
    "support_angle_deg": 15.0,
    "m_final": 500,
    "r_final_frac": 0.05,
    # patches
    "radii_frac": (0.03, 0.04, 0.05),
    "n_patch": 400,
    # network widths
    "encoder_widths": (64, 128, 256, 512),
    "fuse_width": 512,
    "weight_hidden": 256,
    "decoder_widths": (256, 128),
    # synthesis
    "points": 2000,
    "resolution": 8,
    "shapes": "cube,icosahedron,cylinder",
    "noise": "gaussian:0.005,0.01,0.015",
}


def _coerce(key, raw, where=""):
    default = DEFAULT_CONFIG[key]
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(v) for v in text.split(",") if v.strip())
    except ValueError as e:
        raise ConfigError(f"bad value for {key}{where}: '{text}'") from e
    return text


def load_config(path=None):
    """Defaults overlaid with a plain-text config file (``key = value``, ``#`` comments)."""
    cfg = dict(DEFAULT_CONFIG)
    if path is None:
        return cfg
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    for number, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{path}:{number}: expected 'key = value'")
        if key not in DEFAULT_CONFIG:
            raise ConfigError(f"{path}:{number}: unknown key '{key}'")
        cfg[key] = _coerce(key, value, f" ({path}:{number})")
    return cfg


def merge_flags(cfg, args):
    """Flags given on the command line win over file values.

    Any argparse attribute whose name is a config key and whose value is not
    None counts as given.
    """
    merged = dict(cfg)
    for key in DEFAULT_CONFIG:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = _coerce(key, ",".join(map(str, value)) if isinstance(value, (list, tuple)) else value)
    return merged


def format_value(value):
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def echo_config(cfg, log=print):
    log("⚙️  Effective configuration:")
    for k, v in cfg.items():
        log(f"   {k} = {format_value(v)}")


def write_config(cfg, path):
    """Write the effective settings as a file ``load_config`` reads back unchanged."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write("# modnet run configuration\n")
        for k, v in cfg.items():
            f.write(f"{k} = {format_value(v)}\n")
    return path


def handle_config(args):
    cfg = merge_flags(load_config(getattr(args, "config", None)), args)
    echo_config(cfg)
    if getattr(args, "config", None):
        print(f"\n   Config file: {args.config}")
    if getattr(args, "out", None):
        path = write_config(cfg, Path(args.out) / "config.txt")
        print(f"📦 Wrote {path}")


def resolve_config(args, log=print):
    """Defaults, then the --config file, then flags; echoed before anything runs."""
    cfg = merge_flags(load_config(getattr(args, "config", None)), args)
    echo_config(cfg, log)
    return cfg
