"""Command-line interface.

Machine-readable JSON goes to stdout; diagnostics go to stderr. Exit codes:
0 success, 1 runtime/config/data error, 2 usage error.

Every training run persists its resolved configuration (config.json),
deterministic epoch log (history.jsonl), checkpoint (checkpoint.okdc) and
wall-clock report (timing.json) into its output directory; everything but
timing.json is byte-reproducible from config + seed.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .data import SceneParams, load_dataset, load_scene, make_dataset, save_dataset
from .distill import LossWeights, pair_relation, relation_matrix, relation_pairs
from .errors import ConfigError, FormatError, ShapeError
from .model import (
    Model,
    config_from_dict,
    desk_config,
    full_config,
    load_checkpoint,
    save_checkpoint,
    scale_widths,
)
from .tensor import Tensor, no_grad
from .train import TrainConfig, evaluate, train_run

DEFAULT_CONFIG = {
    "data": {"train_dir": None, "eval_dir": None, "sigma": 2.0, "downsample": 8},
    "model": {
        "preset": "desk",
        "widths": None,
        "width_multiplier": 0.25,
        "seed": 0,
        "init": "scaled",
    },
    "train": {
        "mode": "online",
        "epochs": 40,
        "teacher_warmup_epochs": 10,
        "batch_size": 8,
        "student_lr": 1e-4,
        "teacher_lr": 1e-6,
        "warmup_lr": 1e-4,
        "lr_schedule": "constant",
        "grad_clip": 10.0,
        "seed": 0,
        "eval_every": 10,
        "crop": 64,
        "augment": True,
        "alpha1": 1.0,
        "alpha2": 10.0,
        "alpha3": 1000.0,
        "fid": "fid",
        "frd": "dense",
        "rd": "ssim",
        "relation_pool": 8,
        "ssim_window": 8,
        "detach_teacher": True,
    },
}


def _print_json(obj):
    print(json.dumps(obj, sort_keys=True))


def _merge_section(base: dict, user: dict, section: str) -> dict:
    out = dict(base)
    for key, val in user.items():
        if key not in base:
            raise ConfigError(f"unknown key {key!r} in config section {section!r}")
        out[key] = val
    return out


def _load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        user = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: malformed JSON ({e})") from e
    if not isinstance(user, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    out_dir = user.pop("out_dir", None)
    for section, values in user.items():
        if section not in cfg:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        cfg[section] = _merge_section(cfg[section], values, section)
    return cfg, out_dir


def _build_model(mcfg: dict) -> Model:
    if mcfg.get("widths"):
        teacher = config_from_dict(mcfg["widths"])
    else:
        preset = mcfg.get("preset", "desk")
        if preset == "desk":
            teacher = desk_config()
        elif preset == "full":
            teacher = full_config()
        else:
            raise ConfigError(f"unknown model preset {preset!r} (use 'desk', 'full', or widths)")
    student = scale_widths(teacher, float(mcfg.get("width_multiplier", 0.25)))
    init = mcfg.get("init", "scaled")
    return Model(teacher, student, seed=int(mcfg.get("seed", 0)), init=init)


def _train_config(tcfg: dict) -> TrainConfig:
    weights = LossWeights(
        alpha1=float(tcfg["alpha1"]),
        alpha2=float(tcfg["alpha2"]),
        alpha3=float(tcfg["alpha3"]),
        feature_mode=tcfg["fid"],
        relation_mode=tcfg["frd"],
        response_mode=tcfg["rd"],
        relation_pool=int(tcfg["relation_pool"]),
        ssim_window=int(tcfg["ssim_window"]),
        detach_teacher=bool(tcfg["detach_teacher"]),
    )
    return TrainConfig(
        mode=tcfg["mode"],
        epochs=int(tcfg["epochs"]),
        teacher_warmup_epochs=int(tcfg["teacher_warmup_epochs"]),
        batch_size=int(tcfg["batch_size"]),
        student_lr=float(tcfg["student_lr"]),
        teacher_lr=float(tcfg["teacher_lr"]),
        warmup_lr=float(tcfg["warmup_lr"]),
        lr_schedule=tcfg["lr_schedule"],
        grad_clip=float(tcfg["grad_clip"]),
        seed=int(tcfg["seed"]),
        eval_every=int(tcfg["eval_every"]),
        crop=int(tcfg["crop"]),
        augment=bool(tcfg["augment"]),
        sigma=float(tcfg.get("sigma", 2.0)),
        weights=weights,
    ).validate()


def _execute_run(cfg: dict, out_dir: Path) -> dict:
    """Train per resolved config, persist artifacts, return the stdout summary."""
    data_cfg = cfg["data"]
    if not data_cfg.get("train_dir"):
        raise ConfigError("config data.train_dir is required for training")
    sigma = float(data_cfg["sigma"])
    ds = int(data_cfg["downsample"])
    train_scenes = load_dataset(data_cfg["train_dir"], sigma=sigma, downsample=ds)
    if not train_scenes:
        raise ConfigError(f"no scenes found under {data_cfg['train_dir']}")
    eval_scenes = []
    if data_cfg.get("eval_dir"):
        eval_scenes = load_dataset(data_cfg["eval_dir"], sigma=sigma, downsample=ds)

    model = _build_model(cfg["model"])
    tc = _train_config(cfg["train"])
    tc.sigma = sigma
    history, timing = train_run(model, train_scenes, eval_scenes, tc)

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n")
    with open(out_dir / "history.jsonl", "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (out_dir / "timing.json").write_text(json.dumps(timing, sort_keys=True, indent=2) + "\n")
    save_checkpoint(model, out_dir / "checkpoint.okdc")

    final_scenes = eval_scenes if eval_scenes else train_scenes
    final = {b: evaluate(model, final_scenes, b) for b in ("student", "teacher")}
    return {
        "out_dir": str(out_dir),
        "mode": tc.mode,
        "epochs": tc.epochs,
        "teacher_warmup_epochs": tc.teacher_warmup_epochs,
        "final": final,
        "evaluated_on": "eval" if eval_scenes else "train",
        "wall_clock_seconds": timing["wall_clock_seconds"],
    }


# -- subcommands --------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    params = SceneParams(
        size=args.size,
        count_min=args.count_min,
        count_max=args.count_max,
        blob_radius=tuple(args.blob_radius),
        noise=args.noise,
        distractors=args.distractors,
    ).validate()
    scenes = make_dataset(params, args.scenes, seed=args.seed, sigma=args.sigma, downsample=args.downsample)
    out = Path(args.out)
    names = save_dataset(scenes, out)
    manifest = {
        "scenes": len(names),
        "seed": args.seed,
        "params": {
            "size": params.size,
            "count_min": params.count_min,
            "count_max": params.count_max,
            "blob_radius": list(params.blob_radius),
            "noise": params.noise,
            "distractors": params.distractors,
            "sigma": args.sigma,
            "downsample": args.downsample,
        },
        "files": names,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    counts = [s.count for s in scenes]
    _print_json(
        {
            "dir": str(out),
            "scenes": len(names),
            "mean_count": float(np.mean(counts)) if counts else 0.0,
        }
    )
    return 0


_TRAIN_OVERRIDES = (
    ("mode", "mode"),
    ("epochs", "epochs"),
    ("warmup_epochs", "teacher_warmup_epochs"),
    ("batch_size", "batch_size"),
    ("seed", "seed"),
    ("alpha1", "alpha1"),
    ("alpha2", "alpha2"),
    ("alpha3", "alpha3"),
    ("fid", "fid"),
    ("frd", "frd"),
    ("rd", "rd"),
)


def _apply_overrides(cfg: dict, args) -> None:
    for arg_name, key in _TRAIN_OVERRIDES:
        val = getattr(args, arg_name, None)
        if val is not None:
            cfg["train"][key] = val
    if getattr(args, "data", None):
        cfg["data"]["train_dir"] = args.data
    if getattr(args, "eval_data", None):
        cfg["data"]["eval_dir"] = args.eval_data


def _cmd_train(args) -> int:
    cfg, cfg_out = _load_config(args.config)
    _apply_overrides(cfg, args)
    out_dir = Path(args.out or cfg_out or "run")
    summary = _execute_run(cfg, out_dir)
    _print_json(summary)
    return 0


def _model_from_run(checkpoint: str, config: str | None):
    ckpt = Path(checkpoint)
    cfg_path = Path(config) if config else ckpt.parent / "config.json"
    if not cfg_path.exists():
        raise ConfigError(
            f"cannot rebuild the model: no config at {cfg_path} (pass --config explicitly)"
        )
    cfg, _ = _load_config(cfg_path)
    model = _build_model(cfg["model"])
    load_checkpoint(model, ckpt)
    return model, cfg


def _cmd_eval(args) -> int:
    model, cfg = _model_from_run(args.checkpoint, args.config)
    sigma = float(cfg["data"]["sigma"])
    ds = int(cfg["data"]["downsample"])
    scenes = load_dataset(args.data, sigma=sigma, downsample=ds)
    if not scenes:
        raise ConfigError(f"no scenes found under {args.data}")
    if args.branch == "both":
        report = {b: evaluate(model, scenes, b) for b in ("student", "teacher")}
    else:
        report = evaluate(model, scenes, args.branch)
    _print_json(report)
    return 0


_ABLATION_SUITES = {
    "fid": [
        ("baseline", {"fid": "off", "frd": "off", "rd": "off"}),
        ("mse", {"fid": "mse", "frd": "off", "rd": "off"}),
        ("cos", {"fid": "cos", "frd": "off", "rd": "off"}),
        ("fid", {"fid": "fid", "frd": "off", "rd": "off"}),
    ],
    "frd": [
        ("baseline", {"fid": "off", "frd": "off", "rd": "off"}),
        ("sparse", {"fid": "off", "frd": "sparse", "rd": "off"}),
        ("dense", {"fid": "off", "frd": "dense", "rd": "off"}),
    ],
    "rd": [
        ("baseline", {"fid": "off", "frd": "off", "rd": "off"}),
        ("mse", {"fid": "off", "frd": "off", "rd": "mse"}),
        ("ssim", {"fid": "off", "frd": "off", "rd": "ssim"}),
    ],
    "modules": [
        ("none", {"fid": "off", "frd": "off", "rd": "off"}),
        ("fid", {"fid": "fid", "frd": "off", "rd": "off"}),
        ("frd", {"fid": "off", "frd": "dense", "rd": "off"}),
        ("rd", {"fid": "off", "frd": "off", "rd": "ssim"}),
        ("fid+frd", {"fid": "fid", "frd": "dense", "rd": "off"}),
        ("fid+rd", {"fid": "fid", "frd": "off", "rd": "ssim"}),
        ("frd+rd", {"fid": "off", "frd": "dense", "rd": "ssim"}),
        ("fid+frd+rd", {"fid": "fid", "frd": "dense", "rd": "ssim"}),
    ],
}


def _cmd_ablate(args) -> int:
    cfg, cfg_out = _load_config(args.config)
    _apply_overrides(cfg, args)
    out_root = Path(args.out or (cfg_out or "run") + f"-ablate-{args.suite}")
    rows = []
    for name, mods in _ABLATION_SUITES[args.suite]:
        row_cfg = copy.deepcopy(cfg)
        row_cfg["train"].update(mods)
        print(f"[ablate:{args.suite}] training row {name!r}", file=sys.stderr)
        summary = _execute_run(row_cfg, out_root / name)
        rows.append(
            {
                "row": name,
                "fid": mods["fid"],
                "frd": mods["frd"],
                "rd": mods["rd"],
                "student_mae": summary["final"]["student"]["mae"],
                "student_mse": summary["final"]["student"]["mse"],
                "teacher_mae": summary["final"]["teacher"]["mae"],
            }
        )
    header = ["row", "fid", "frd", "rd", "student_mae", "student_mse", "teacher_mae"]
    with open(out_root / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in rows:
            writer.writerow([r["row"], r["fid"], r["frd"], r["rd"],
                             f"{r['student_mae']:.4f}", f"{r['student_mse']:.4f}",
                             f"{r['teacher_mae']:.4f}"])
    widths = [max(len(str(h)), 12) for h in header]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for r in rows:
        cells = [r["row"], r["fid"], r["frd"], r["rd"],
                 f"{r['student_mae']:.4f}", f"{r['student_mse']:.4f}", f"{r['teacher_mae']:.4f}"]
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(cells, widths)))
    (out_root / "summary.txt").write_text("\n".join(lines) + "\n")
    _print_json({"suite": args.suite, "out_dir": str(out_root), "rows": rows})
    return 0


def _write_pgm(path: Path, mat: np.ndarray) -> None:
    lo, hi = float(mat.min()), float(mat.max())
    if hi > lo:
        q = np.round((mat - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        q = np.zeros(mat.shape, dtype=np.uint8)
    h, w = mat.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def _cmd_inspect_relations(args) -> int:
    model, cfg = _model_from_run(args.checkpoint, args.config)
    sigma = float(cfg["data"]["sigma"])
    ds = int(cfg["data"]["downsample"])
    scene = load_scene(args.image, sigma=sigma, downsample=ds)
    pool = args.pool or int(cfg["train"]["relation_pool"])
    with no_grad():
        out = model.forward_joint(Tensor(scene.image[None]))
        feats = {"teacher": out.features.teacher, "student": out.features.adapted}
        kmats = {b: [relation_matrix(f, pool) for f in fs] for b, fs in feats.items()}
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    n = len(feats["teacher"])
    for i, j in relation_pairs(n, "dense"):
        for branch in ("teacher", "student"):
            r = pair_relation(kmats[branch][i], kmats[branch][j]).data[0]
            stem = f"relation_b{i + 2}b{j + 2}_{branch}"
            np.savetxt(out_dir / f"{stem}.txt", r, fmt="%.17g")
            _write_pgm(out_dir / f"{stem}.pgm", r)
            files.extend([f"{stem}.txt", f"{stem}.pgm"])
    _print_json({"out_dir": str(out_dir), "pairs": len(relation_pairs(n, "dense")), "files": files})
    return 0


def _cmd_bench(args) -> int:
    report = bench_mod.run(size=args.size, reps=args.reps)
    print(bench_mod.format_table(report), file=sys.stderr)
    _print_json(report)
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="okdcount",
        description="Online teacher-student distillation for crowd-density regression.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic annotated dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--scenes", type=int, required=True, help="number of scenes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=64, help="square scene size in pixels")
    g.add_argument("--count-min", type=int, default=5)
    g.add_argument("--count-max", type=int, default=80)
    g.add_argument("--blob-radius", type=float, nargs=2, default=(1.5, 3.5),
                   metavar=("LO", "HI"), help="head blob radius range in pixels")
    g.add_argument("--noise", type=float, default=0.08, help="background texture level")
    g.add_argument("--distractors", type=float, default=0.0,
                   help="ratio of unannotated opposite-polarity blobs (0 = off)")
    g.add_argument("--sigma", type=float, default=2.0, help="density kernel sigma (grid units)")
    g.add_argument("--downsample", type=int, default=8, help="density grid stride")
    g.set_defaults(func=_cmd_gen_data)

    t = sub.add_parser("train", help="train per a JSON config, with flag overrides")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (overrides config out_dir)")
    t.add_argument("--data", help="training dataset directory")
    t.add_argument("--eval-data", dest="eval_data", help="evaluation dataset directory")
    t.add_argument("--mode", choices=["online", "two_phase", "student_only", "teacher_only"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--alpha1", type=float, help="feature distillation weight")
    t.add_argument("--alpha2", type=float, help="relation distillation weight")
    t.add_argument("--alpha3", type=float, help="response distillation weight")
    t.add_argument("--fid", choices=["fid", "mse", "cos", "off"], help="feature loss variant")
    t.add_argument("--frd", choices=["dense", "sparse", "off"], help="relation pair coverage")
    t.add_argument("--rd", choices=["ssim", "mse", "off"], help="response loss variant")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--branch", choices=["student", "teacher", "both"], default="student")
    e.add_argument("--config", help="resolved config (defaults to config.json beside the checkpoint)")
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation suite of training rows")
    a.add_argument("--config", required=True)
    a.add_argument("--suite", choices=sorted(_ABLATION_SUITES), required=True)
    a.add_argument("--out", help="output root (default: <config out_dir>-ablate-<suite>)")
    a.add_argument("--data", help="training dataset directory")
    a.add_argument("--eval-data", dest="eval_data", help="evaluation dataset directory")
    a.add_argument("--epochs", type=int)
    a.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
    a.add_argument("--seed", type=int)
    a.set_defaults(func=_cmd_ablate)

    i = sub.add_parser("inspect-relations", help="dump cross-block relation matrices for one scene")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True, help="a .okdi scene file")
    i.add_argument("--out", required=True)
    i.add_argument("--pool", type=int, help="relation pooling size (default: from config)")
    i.add_argument("--config", help="resolved config (defaults to config.json beside the checkpoint)")
    i.set_defaults(func=_cmd_inspect_relations)

    b = sub.add_parser("bench", help="compare the compiled and numpy kernel backends")
    b.add_argument("--size", type=int, default=64)
    b.add_argument("--reps", type=int, default=3)
    b.set_defaults(func=_cmd_bench)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError, ShapeError, ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
