"""Command-line interface: ``pdsa train | eval | ablate | inspect``.

Settings come from a flat ``section.key = value`` file (``--config``) and are
overridden by ``--section.key VALUE`` flags. The effective configuration is
written to ``config.txt`` in the output directory.

Exit codes: 0 success, 1 bad configuration, 2 usage error (argparse),
3 numeric fault, 4 missing input or unwritable output, 5 incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .data import atomic_write_text, compute_metrics, read_cloud, write_cloud
from .geom import PointCloud
from .network import ModelConfig, StageConfig, build_plan, init_params
from .tensor import DTYPE_TRAIN, load_checkpoint, load_params_into
from .train import (
    DataConfig,
    TrainConfig,
    ablation_csv,
    attention_heat,
    load_split,
    predict,
    run_ablation,
    train_model,
)

ENV_OUTPUT_DIR = "PDSA_OUTPUT_DIR"

EXIT_OK, EXIT_CONFIG, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO, EXIT_CHECKPOINT = 0, 1, 2, 3, 4, 5

# key -> (type, default, help); "bool" values accept true/false/1/0/yes/no
SCHEMA = {
    "model.variant": (str, "pdsa", "pdsa or sa_baseline"),
    "model.channels": (int, 16, "base width C; stage s uses C*2^s"),
    "model.stages": (str, "4:0.4:16,4:0.8:16", "comma list of stride:radius:k"),
    "model.la_blocks": (int, 0, "extra stride-1 blocks after every stage"),
    "model.a_dim": (int, 3, "compressed descriptor width"),
    "model.rho": (float, 0.25, "key-point fraction for global attention"),
    "model.hidden": (int, 16, "hidden width of the denoising MLPs"),
    "model.cdip": ("bool", True, "neighbor denoising correction"),
    "model.dw": ("bool", True, "distance weighting in the descriptor"),
    "model.cics": ("bool", True, "global descriptor attention correction"),
    "model.init_encoding": (str, "distribution", "distribution or centroid"),
    "model.full_attention_max": (int, 256, "largest stage that uses full attention"),
    "train.lr": (float, 0.002, "peak learning rate"),
    "train.weight_decay": (float, 1e-4, "decoupled weight decay"),
    "train.epochs": (int, 60, "training epochs"),
    "train.batch": (int, 32, "batch size (training and evaluation)"),
    "train.seed": (int, 0, "initialization and shuffling seed"),
    "train.smoothing": (float, 0.1, "label smoothing"),
    "train.schedule": (str, "cosine", "cosine or constant"),
    "train.threads": (int, 1, "data-parallel shards; results are deterministic only at 1"),
    "train.augment": (bool, True, "random rotation of each training cloud at every step"),
    "data.n_points": (int, 1024, "points per shape"),
    "data.train_per_class": (int, 200, "training shapes per class (seeds 0..n-1)"),
    "data.test_per_class": (int, 50, "test shapes per class (seeds from data.test_seed_offset)"),
    "data.test_seed_offset": (int, 200, "first test seed"),
    "data.noise_sigma": (float, 0.01, "Gaussian jitter on the surface samples"),
    "data.rotate": ("bool", True, "random 3D rotation per shape"),
    "data.outlier_fraction": (float, 0.0, "fraction of points replaced by outliers"),
    "data.outlier_spread": (float, 1.0, "half-width of the outlier box"),
    "io.output_dir": (str, None, f"output directory (default ${ENV_OUTPUT_DIR} or ./runs)"),
    "io.checkpoint": (str, "", "checkpoint to load (eval, inspect)"),
    "ablate.sweep": (str, "ladder", "ladder or a_dim"),
    "ablate.seeds": (str, "0,1,2,3,4", "comma list of training seeds"),
    "ablate.a_dims": (str, "1,2,3,4", "descriptor widths for the a_dim sweep"),
    "ablate.var_samples": (int, 256, "neighborhoods sampled for the row-variance proxy"),
    "inspect.input": (str, "", "input PLY cloud"),
    "inspect.rho": (float, -1.0, "key fraction for the key-point file (negative: model.rho)"),
}


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str):
    kind = SCHEMA[key][0]
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from exc


def default_config() -> dict:
    cfg = {k: v[1] for k, v in SCHEMA.items()}
    cfg["io.output_dir"] = os.environ.get(ENV_OUTPUT_DIR) or "runs"
    return cfg


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'section.key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def format_config(cfg: dict) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        return "" if v is None else str(v)
    return "".join(f"{k} = {fmt(cfg[k])}\n" for k in SCHEMA)


def parse_stages(text: str, la_blocks: int) -> list[StageConfig]:
    stages = []
    for part in text.split(","):
        bits = part.strip().split(":")
        if len(bits) != 3:
            raise ConfigError(f"model.stages: bad entry {part!r}; expected stride:radius:k")
        try:
            stages.append(StageConfig(int(bits[0]), float(bits[1]), int(bits[2]), la_blocks))
        except ValueError as exc:
            raise ConfigError(f"model.stages: bad entry {part!r}") from exc
    return stages


def _int_list(key: str, text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"{key}: expected a comma list of integers") from exc


def build_configs(cfg: dict) -> tuple[ModelConfig, TrainConfig, DataConfig]:
    try:
        model = ModelConfig(
            channels=cfg["model.channels"],
            stages=parse_stages(cfg["model.stages"], cfg["model.la_blocks"]),
            a_dim=cfg["model.a_dim"], rho=cfg["model.rho"], hidden=cfg["model.hidden"],
            variant=cfg["model.variant"], cdip=cfg["model.cdip"], dw=cfg["model.dw"], cics=cfg["model.cics"],
            init_encoding=cfg["model.init_encoding"], full_attention_max=cfg["model.full_attention_max"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    train = TrainConfig(**{k.split(".", 1)[1]: cfg[k] for k in SCHEMA if k.startswith("train.")})
    data = DataConfig(**{k.split(".", 1)[1]: cfg[k] for k in SCHEMA if k.startswith("data.")})
    if train.batch < 1 or train.epochs < 0 or train.threads < 1:
        raise ConfigError("train.batch and train.threads must be >= 1 and train.epochs >= 0")
    if train.schedule not in ("cosine", "constant"):
        raise ConfigError(f"train.schedule: unknown schedule {train.schedule!r}")
    if not 0.0 <= train.smoothing < 1.0:
        raise ConfigError("train.smoothing must lie in [0, 1)")
    if not 0.0 < model.rho <= 1.0:
        raise ConfigError("model.rho must lie in (0, 1]")
    if model.a_dim < 1:
        raise ConfigError("model.a_dim must be >= 1")
    if not 0.0 <= data.outlier_fraction < 1.0:
        raise ConfigError("data.outlier_fraction must lie in [0, 1)")
    if data.n_points < 8:
        raise ConfigError("data.n_points must be at least 8")
    return model, train, data


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pdsa", description=__doc__, allow_abbrev=False, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("train", "train a classifier"), ("eval", "evaluate a checkpoint"),
                           ("ablate", "train an ablation sweep"), ("inspect", "export attention heat PLYs")):
        p = sub.add_parser(name, help=helptext, allow_abbrev=False)
        p.add_argument("--config", help="flat 'section.key = value' file")
        for key, (kind, default, text) in SCHEMA.items():
            shown = (os.environ.get(ENV_OUTPUT_DIR) or "runs") if key == "io.output_dir" else default
            p.add_argument(f"--{key}", dest=key, metavar="VALUE", default=None,
                           help=f"{text} (default: {shown})")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = default_config()
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config file {args.config}: {exc}") from exc
        cfg.update(parse_config_text(text, args.config))
    for key in SCHEMA:
        raw = getattr(args, key)
        if raw is not None:
            cfg[key] = _parse_value(key, raw)
    return cfg


def _prepare_output(cfg: dict) -> str:
    out = cfg["io.output_dir"]
    os.makedirs(out, exist_ok=True)
    atomic_write_text(os.path.join(out, "config.txt"), format_config(cfg))
    return out


def _load_model(cfg: dict, model: ModelConfig):
    path = cfg["io.checkpoint"] or os.path.join(cfg["io.output_dir"], "final.ckpt")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    params = init_params(model, 0, DTYPE_TRAIN)
    tensors = load_checkpoint(path)
    load_params_into(params, tensors)
    return params


class CheckpointMismatch(Exception):
    pass


def cmd_train(cfg: dict) -> int:
    model, tc, data = build_configs(cfg)
    out = _prepare_output(cfg)
    train = load_split(data, model, "train")
    test = load_split(data, model, "test")

    def report(row):
        print(f"epoch {row['epoch']}: loss {row['loss']:.4f} train_acc {row['train_acc']:.4f} "
              f"test_acc {row['test_acc']:.4f}", flush=True)

    res = train_model(model, tc, train, test, out, on_epoch=report)
    print(f"best test_acc {res.best_test_acc:.4f} at epoch {res.best_epoch}; artifacts in {out}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    model, tc, data = build_configs(cfg)
    out = _prepare_output(cfg)
    try:
        params = _load_model(cfg, model)
    except ValueError as exc:
        raise CheckpointMismatch(str(exc)) from exc
    test = load_split(data, model, "test")
    if len(test) == 0:
        raise ConfigError("the test split is empty")
    preds = predict(params, model, test, tc.batch)
    report = compute_metrics(preds, test.labels, model.n_classes)
    text = report.to_csv()
    atomic_write_text(os.path.join(out, "metrics.csv"), text)
    sys.stdout.write(text)
    print(f"oa {report.oa:.9g} macc {report.macc:.9g} miou {report.miou:.9g}")
    return EXIT_OK


def cmd_ablate(cfg: dict) -> int:
    model, tc, data = build_configs(cfg)
    out = _prepare_output(cfg)
    seeds = _int_list("ablate.seeds", cfg["ablate.seeds"])
    a_dims = _int_list("ablate.a_dims", cfg["ablate.a_dims"])
    if cfg["ablate.sweep"] not in ("ladder", "a_dim"):
        raise ConfigError(f"ablate.sweep: unknown sweep {cfg['ablate.sweep']!r}")
    if any(a < 1 for a in a_dims):
        raise ConfigError("ablate.a_dims entries must be >= 1")
    path = os.path.join(out, "ablation.csv")
    rows = []

    def on_row(row):
        rows.append(row)
        atomic_write_text(path, ablation_csv(rows))
        print(f"{row.variant} seed {row.seed}: test_oa {row.test_oa:.4f} mean_nbr_var {row.mean_nbr_var:.6g}",
              flush=True)

    atomic_write_text(path, ablation_csv(rows))
    run_ablation(model, tc, data, seeds, cfg["ablate.sweep"], cfg["ablate.var_samples"], a_dims, on_row)
    sys.stdout.write(ablation_csv(rows))
    return EXIT_OK


def cmd_inspect(cfg: dict) -> int:
    model, _, _ = build_configs(cfg)
    out = _prepare_output(cfg)
    if not cfg["inspect.input"]:
        raise ConfigError("inspect.input is required")
    if not os.path.isfile(cfg["inspect.input"]):
        raise FileNotFoundError(f"input cloud not found: {cfg['inspect.input']}")
    try:
        params = _load_model(cfg, model)
    except ValueError as exc:
        raise CheckpointMismatch(str(exc)) from exc
    cloud = read_cloud(cfg["inspect.input"])
    rho = cfg["inspect.rho"] if cfg["inspect.rho"] > 0 else None
    plan = build_plan(cloud.coords, model)
    heat, sel = attention_heat(params, model, plan, rho)
    stem = os.path.splitext(os.path.basename(cfg["inspect.input"]))[0]
    heat_path = os.path.join(out, f"{stem}_heat.ply")
    key_path = os.path.join(out, f"{stem}_keys.ply")
    write_cloud(heat_path, PointCloud(cloud.coords, labels=cloud.labels), {"heat": heat})
    key_pts = plan.blocks[0].centers[np.asarray(sel.keys)]
    write_cloud(key_path, PointCloud(cloud.coords[key_pts]), {"heat": heat[key_pts]})
    print(f"heat std {float(np.std(heat)):.6g}; {len(key_pts)} key points; wrote {heat_path} and {key_path}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "inspect": cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"error: numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointMismatch as exc:
        print(f"error: incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ValueError as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, PermissionError, IsADirectoryError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
