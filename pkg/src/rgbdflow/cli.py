"""Command-line entry points for the full pipeline.

Subcommands: ``gen-data``, ``corrupt``, ``train``, ``eval``,
``gradcheck``, ``plot``. Every run merges three layers of options
(built-in defaults, then a flat ``key=value`` ``--config`` file, then
explicit flags), writes the fully resolved result to
``<out>/resolved_config.txt``, and is reproducible byte for byte from
that echo. Exit codes: 0 success, 1 validation or I/O error, 2 numeric
failure (non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import fileio, metrics, plots
from .data import CorruptionSpec, SceneConfig, gen_synthetic
from .encoder import EncoderConfig
from .fileio import FormatError, SampleFiles
from .flow import FlowModel, Intrinsics, ModelConfig, lift_to_3d
from .metrics import REPORT_FIELDS, evaluate_pair, mean_report, report_csv_cells
from .tape import Tensor, no_grad
from .train import (
    NumericError,
    TrainConfig,
    group_summary,
    load_dataset,
    train_model,
    verify_gradients,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2

RESOLVED_CONFIG_NAME = "resolved_config.txt"


class CliError(ValueError):
    """A user-facing validation problem; maps to exit code 1."""


# ---------------------------------------------------------------------------
# option plumbing

_GLOBAL_DEFAULTS = {"seed": 0, "out": None, "threads": 1}

_MODEL_DEFAULTS = {
    "channels": 64,
    "heads": 4,
    "n_mmtm": 3,
    "z_max": 10.0,
    "no_sa": False,
    "sa_rgb_only": False,
    "no_ca": False,
    "fusion": "mmtm",
    "rgb_only": False,
    "d_z": 0,
    "corr_levels": 4,
    "radius": 4,
    "iterations": 8,
}

_INTRINSIC_DEFAULTS = {"fx": 0.0, "fy": 0.0, "cx": -1.0, "cy": -1.0}

DEFAULTS: dict[str, dict] = {
    "gen-data": {
        **_GLOBAL_DEFAULTS,
        "count": 100,
        "height": 64,
        "width": 64,
        "n_layers": 3,
        "max_disp": 8.0,
        "depth_min": 2.0,
        "depth_max": 8.0,
        "fractional_offsets": False,
        **_INTRINSIC_DEFAULTS,
    },
    "corrupt": {
        **_GLOBAL_DEFAULTS,
        "manifest": None,
        "setting": "standard",
        "sigma": 35.0,
    },
    "train": {
        **_GLOBAL_DEFAULTS,
        "manifest": None,
        "steps": 2000,
        "lr": 1.25e-4,
        "optimizer": "adam",
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "clip_norm": 1.0,
        "gamma": 0.8,
        "batch_size": 1,
        "checkpoint_every": 500,
        "augment": "none",
        "sigma": 35.0,
        **_MODEL_DEFAULTS,
    },
    "eval": {
        **_GLOBAL_DEFAULTS,
        "manifest": None,
        "checkpoint": "",
        "predictor": "model",
        "setting": "standard",
        "fl_mode": "or",
        "eval_iterations": 0,
        **_INTRINSIC_DEFAULTS,
        **_MODEL_DEFAULTS,
    },
    "gradcheck": {
        **_GLOBAL_DEFAULTS,
        "size": 8,
        "coords_per_param": 2,
        "step_size": 1e-5,
        "tolerance": 1e-4,
        "inject_bug": False,
        **{
            **_MODEL_DEFAULTS,
            "channels": 8,
            "n_mmtm": 1,
            "corr_levels": 2,
            "radius": 2,
            "iterations": 2,
        },
    },
    "plot": {
        **_GLOBAL_DEFAULTS,
        "pred": None,
        "gt": None,
        "max_error": 10.0,
        "figure": False,
    },
}

_REQUIRED_HELP = {
    "out": "--out",
    "manifest": "--manifest",
    "pred": "--pred",
    "gt": "--gt",
}

# choices that argparse enforces on flags must hold for config-file
# values too; free-form keys (eval's setting label) are absent here
_CHOICES: dict[tuple[str, str], tuple[str, ...]] = {
    ("corrupt", "setting"): ("standard", "agn", "dark"),
    ("train", "optimizer"): ("adam", "sgd"),
    ("train", "augment"): ("none", "agn", "dark"),
    ("train", "fusion"): ("mmtm", "concat"),
    ("eval", "predictor"): ("model", "zero", "gt"),
    ("eval", "fl_mode"): ("or", "and"),
    ("eval", "fusion"): ("mmtm", "concat"),
    ("gradcheck", "fusion"): ("mmtm", "concat"),
}


def _coerce(command: str, key: str, text: str):
    """Parse a config-file value using the default's type."""
    default = DEFAULTS[command][key]
    if isinstance(default, bool):
        if text not in ("true", "false"):
            raise CliError(f"option {key} must be true or false, got {text!r}")
        return text == "true"
    if isinstance(default, int) and default is not None:
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _format_option(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolve_options(command: str, ns: argparse.Namespace) -> tuple[dict, set]:
    """Merge defaults <- config file <- explicit flags.

    Returns the full option dict and the set of keys the user provided
    through either layer (used to tell overrides from defaults).
    """
    merged = dict(DEFAULTS[command])
    provided: set[str] = set()
    flags = {
        k: v for k, v in vars(ns).items() if k not in ("command", "config", "func")
    }
    config_path = getattr(ns, "config", None)
    if config_path:
        for key, text in fileio.read_kv_config(config_path).items():
            if key not in merged:
                raise CliError(f"{config_path}: unknown option {key!r} for {command}")
            merged[key] = _coerce(command, key, text)
            provided.add(key)
    for key, value in flags.items():
        merged[key] = value
        provided.add(key)
    for key, value in merged.items():
        if value is None:
            raise CliError(f"missing required option {_REQUIRED_HELP.get(key, key)}")
        allowed = _CHOICES.get((command, key))
        if allowed and value not in allowed:
            raise CliError(
                f"option {key} must be one of {', '.join(allowed)}, got {value!r}"
            )
    return merged, provided


def write_resolved_config(opt: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        k: _format_option(v) for k, v in opt.items() if not k.startswith("_")
    }
    fileio.write_kv_config(os.path.join(out_dir, RESOLVED_CONFIG_NAME), payload)


def model_config_from_options(opt: dict) -> ModelConfig:
    encoder = EncoderConfig(
        channels=opt["channels"],
        heads=opt["heads"],
        n_mmtm=opt["n_mmtm"],
        z_max=opt["z_max"],
        use_self_attention=not opt["no_sa"],
        self_attention_rgb_only=opt["sa_rgb_only"],
        use_cross_attention=not opt["no_ca"] and not opt["rgb_only"],
        fusion=opt["fusion"],
        rgb_only=opt["rgb_only"],
        d_z=opt["d_z"],
    )
    return ModelConfig(
        encoder=encoder,
        corr_levels=opt["corr_levels"],
        radius=opt["radius"],
        iterations=opt["iterations"],
    )


def reflect_model_options(opt: dict, cfg: ModelConfig) -> None:
    """Write the architecture actually in use back into the option dict
    so the resolved-config echo reproduces this run even when the
    architecture came from a checkpoint's meta block."""
    enc = cfg.encoder
    opt.update(
        channels=enc.channels,
        heads=enc.heads,
        n_mmtm=enc.n_mmtm,
        z_max=enc.z_max,
        no_sa=not enc.use_self_attention,
        sa_rgb_only=enc.self_attention_rgb_only,
        no_ca=not enc.use_cross_attention,
        fusion=enc.fusion,
        rgb_only=enc.rgb_only,
        d_z=enc.d_z,
        corr_levels=cfg.corr_levels,
        radius=cfg.radius,
        iterations=cfg.iterations,
    )


def intrinsics_from_options(opt: dict, height: int, width: int) -> Intrinsics:
    """The same defaulting rule the generator uses, so evaluation sees
    the intrinsics the data was built with unless overridden."""
    return Intrinsics(
        fx=opt["fx"] if opt["fx"] > 0 else float(max(height, width)),
        fy=opt["fy"] if opt["fy"] > 0 else float(max(height, width)),
        cx=opt["cx"] if opt["cx"] >= 0 else (width - 1) / 2.0,
        cy=opt["cy"] if opt["cy"] >= 0 else (height - 1) / 2.0,
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(opt: dict) -> int:
    scene = SceneConfig(
        height=opt["height"],
        width=opt["width"],
        n_layers=opt["n_layers"],
        max_disp=opt["max_disp"],
        depth_min=opt["depth_min"],
        depth_max=opt["depth_max"],
        fractional_offsets=opt["fractional_offsets"],
        fx=opt["fx"],
        fy=opt["fy"],
        cx=opt["cx"],
        cy=opt["cy"],
    )
    out = opt["out"]
    os.makedirs(out, exist_ok=True)
    write_resolved_config(opt, out)
    entries = []
    for i in range(opt["count"]):
        pair = gen_synthetic(np.random.SeedSequence((opt["seed"], i)), scene)
        stem = f"sample{i:05d}"
        entry = SampleFiles(
            rgb1=f"{stem}_rgb1.ppm",
            depth1=f"{stem}_depth1.pgm",
            rgb2=f"{stem}_rgb2.ppm",
            depth2=f"{stem}_depth2.pgm",
            flow2d=f"{stem}_flow2d.flo",
            flow3d=f"{stem}_flow3d.f3d",
            mask=f"{stem}_mask.pgm",
        )
        files = entry.resolve(out)
        fileio.write_rgb_ppm(files.rgb1, pair.frame_t.rgb)
        fileio.write_depth_pgm(files.depth1, pair.frame_t.depth)
        fileio.write_rgb_ppm(files.rgb2, pair.frame_t1.rgb)
        fileio.write_depth_pgm(files.depth2, pair.frame_t1.depth)
        fileio.write_flo(files.flow2d, pair.gt_flow2d)
        fileio.write_flow3d(files.flow3d, pair.gt_flow3d)
        fileio.write_mask_pgm(files.mask, pair.valid)
        entries.append(entry)
    fileio.write_manifest(os.path.join(out, "manifest.txt"), entries)
    print(f"wrote {len(entries)} sample pairs to {out}")
    return EXIT_OK


def cmd_corrupt(opt: dict) -> int:
    kind = {"standard": "none", "agn": "agn", "dark": "dark"}[opt["setting"]]
    spec = CorruptionSpec(kind=kind, sigma=opt["sigma"], seed=opt["seed"])
    manifest_path = opt["manifest"]
    entries = fileio.read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    out = opt["out"]
    os.makedirs(out, exist_ok=True)
    write_resolved_config(opt, out)

    for i, entry in enumerate(entries):
        src = entry.resolve(base)
        dst = entry.resolve(out)
        for column in fileio.MANIFEST_COLUMNS:
            if not os.path.isfile(getattr(src, column)):
                raise CliError(
                    f"{manifest_path}: line {i + 1}: missing file "
                    f"{getattr(src, column)} ({column})"
                )
        seed1, seed2 = spec.seeds_for_pair(i)
        for column, frame_seed in (("rgb1", seed1), ("rgb2", seed2)):
            if kind == "none":
                _copy_bytes(getattr(src, column), getattr(dst, column))
            else:
                rgb = fileio.read_rgb_ppm(getattr(src, column))
                fileio.write_rgb_ppm(getattr(dst, column), spec.apply(rgb, frame_seed))
        for column in ("depth1", "depth2", "flow2d", "flow3d", "mask"):
            _copy_bytes(getattr(src, column), getattr(dst, column))
    fileio.write_manifest(os.path.join(out, "manifest.txt"), entries)
    print(f"wrote {len(entries)} {opt['setting']} pairs to {out}")
    return EXIT_OK


def _copy_bytes(src, dst) -> None:
    with open(src, "rb") as fh:
        payload = fh.read()
    with open(dst, "wb") as fh:
        fh.write(payload)


def cmd_train(opt: dict) -> int:
    model_cfg = model_config_from_options(opt)
    train_cfg = TrainConfig(
        steps=opt["steps"],
        lr=opt["lr"],
        optimizer=opt["optimizer"],
        beta1=opt["beta1"],
        beta2=opt["beta2"],
        adam_eps=opt["adam_eps"],
        clip_norm=opt["clip_norm"],
        gamma=opt["gamma"],
        batch_size=opt["batch_size"],
        checkpoint_every=opt["checkpoint_every"],
        augment=opt["augment"],
        sigma=opt["sigma"],
        seed=opt["seed"],
    )
    samples = load_dataset(opt["manifest"])
    if not samples:
        raise CliError(f"{opt['manifest']}: no samples to train on")
    out = opt["out"]
    os.makedirs(out, exist_ok=True)
    write_resolved_config(opt, out)

    model = FlowModel.create(model_cfg, opt["seed"])
    meta = dict(model_cfg.to_flat())
    meta["init_seed"] = str(opt["seed"])

    def save_checkpoint(step: int, params) -> None:
        name = (
            "ckpt_final.bin"
            if step == train_cfg.steps
            else f"ckpt_step{step:06d}.bin"
        )
        fileio.write_checkpoint(
            os.path.join(out, name), params, {**meta, "step": str(step)}
        )

    rows = train_model(model, samples, train_cfg, checkpoint_cb=save_checkpoint)

    log_path = os.path.join(out, "loss_log.csv")
    with open(log_path, "w", encoding="ascii") as fh:
        fh.write("step,loss,lr\n")
        for row in rows:
            fh.write(f"{row.step},{row.loss!r},{row.lr!r}\n")
    plots.save_loss_curve_png(rows, os.path.join(out, "loss_curve.png"))
    print(
        f"trained {train_cfg.steps} steps; first loss {rows[0].loss:.6g}, "
        f"last loss {rows[-1].loss:.6g}; artifacts in {out}"
    )
    return EXIT_OK


def _checkpoint_model(opt: dict, provided: set) -> FlowModel:
    """Build the evaluation model from a checkpoint, honoring explicit
    architecture overrides and rejecting incompatible shapes."""
    params, meta = fileio.read_checkpoint(opt["checkpoint"])
    arch_keys = set(_MODEL_DEFAULTS)
    if provided & arch_keys:
        cfg = model_config_from_options(opt)
    else:
        cfg = ModelConfig.from_flat(meta)
    expected = FlowModel.create(cfg, seed=0).signature()
    found = {k: tuple(v.shape) for k, v in params.items()}
    mismatched = sorted(
        k
        for k in expected.keys() | found.keys()
        if expected.get(k) != found.get(k)
    )
    if mismatched:
        raise CliError(
            "checkpoint is incompatible with the requested architecture; "
            "mismatched parameter paths: " + ", ".join(mismatched)
        )
    return FlowModel(cfg, {k: Tensor(v) for k, v in params.items()})


def cmd_eval(opt: dict) -> int:
    predictor = opt["predictor"]
    model = None
    if predictor == "model":
        if not opt["checkpoint"]:
            raise CliError("--checkpoint is required with --predictor model")
        model = _checkpoint_model(opt, opt["_provided"])
        reflect_model_options(opt, model.cfg)
    samples = load_dataset(opt["manifest"], with_flow3d=True)
    if not samples:
        raise CliError(f"{opt['manifest']}: no samples to evaluate")
    out = opt["out"]
    os.makedirs(out, exist_ok=True)
    write_resolved_config(opt, out)
    iterations = opt["eval_iterations"] or None

    def evaluate_one(index: int):
        sample = samples[index]
        height, width = sample.depth1.shape
        intr = intrinsics_from_options(opt, height, width)
        with no_grad():
            if predictor == "model":
                preds = model.estimate(
                    sample.rgb1,
                    sample.depth1,
                    sample.rgb2,
                    sample.depth2,
                    iterations=iterations,
                )
                pred2d = preds[-1].data
            elif predictor == "zero":
                pred2d = np.zeros_like(sample.flow2d)
            else:  # "gt": the oracle predictor
                pred2d = sample.flow2d
        pred3d, liftable = lift_to_3d(pred2d, sample.depth1, sample.depth2, intr)
        mask3d = sample.valid & liftable
        report = metrics.evaluate_pair(
            pred2d,
            sample.flow2d,
            sample.valid,
            pred3d,
            sample.flow3d,
            mask3d,
            fl_mode=opt["fl_mode"],
        )
        epe = metrics.epe_map_2d(pred2d, sample.flow2d, sample.valid)
        return report, epe

    threads = max(1, opt["threads"])
    indices = range(len(samples))
    if threads == 1:
        results = [evaluate_one(i) for i in indices]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(evaluate_one, indices))

    reports = [r for r, _ in results]
    csv_path = os.path.join(out, "eval_report.csv")
    with open(csv_path, "w", encoding="ascii") as fh:
        fh.write("sample,setting," + ",".join(REPORT_FIELDS) + "\n")
        for i, report in enumerate(reports):  # manifest order, always
            cells = [f"{i:05d}", opt["setting"]] + report_csv_cells(report)
            fh.write(",".join(cells) + "\n")
        summary = mean_report(reports)
        fh.write(",".join(["mean", opt["setting"]] + report_csv_cells(summary)) + "\n")
    plots.save_epe_histogram_png(
        np.concatenate([e for _, e in results]),
        os.path.join(out, "epe_hist.png"),
        title=f"2-D EPE, setting={opt['setting']}, predictor={predictor}",
    )
    print(
        f"evaluated {len(reports)} samples ({opt['setting']}, {predictor}); "
        f"mean AEPE 2D {metrics.format_value(summary.aepe_all_2d)}, "
        f"ACC 1px {metrics.format_value(summary.acc_1px)}; report at {csv_path}"
    )
    return EXIT_OK


def cmd_gradcheck(opt: dict) -> int:
    model_cfg = model_config_from_options(opt)
    out = opt["out"]
    os.makedirs(out, exist_ok=True)
    write_resolved_config(opt, out)
    rows = verify_gradients(
        model_cfg,
        size=opt["size"],
        seed=opt["seed"],
        coords_per_param=opt["coords_per_param"],
        h=opt["step_size"],
        tolerance=opt["tolerance"],
        inject_bug=opt["inject_bug"],
    )
    csv_path = os.path.join(out, "gradcheck.csv")
    with open(csv_path, "w", encoding="ascii") as fh:
        fh.write("group,path,max_rel_error,passed\n")
        for row in rows:
            fh.write(
                f"{row.group},{row.path},{row.max_rel_error!r},"
                f"{'true' if row.passed else 'false'}\n"
            )
    for row in rows:
        print(f"{'PASS' if row.passed else 'FAIL'} {row.path} {row.max_rel_error:.3e}")
    all_ok = True
    for group, (worst, ok) in sorted(group_summary(rows).items()):
        print(f"group {group}: max rel error {worst:.3e} {'PASS' if ok else 'FAIL'}")
        all_ok &= ok
    print(f"gradient check {'PASSED' if all_ok else 'FAILED'} ({len(rows)} tensors)")
    return EXIT_OK if all_ok else EXIT_NUMERIC


def cmd_plot(opt: dict) -> int:
    pred = fileio.read_flo(opt["pred"])
    gt = fileio.read_flo(opt["gt"])
    if pred.shape != gt.shape:
        raise CliError(
            f"flow extents disagree: {pred.shape[1:]} vs {gt.shape[1:]}"
        )
    out = opt["out"]
    os.makedirs(out, exist_ok=True)
    write_resolved_config(opt, out)
    heat = plots.error_heatmap_rgb(pred, gt, opt["max_error"])
    fileio.write_rgb_ppm(os.path.join(out, "error_heatmap.ppm"), heat)
    wheel = plots.flow_wheel_rgb(pred)
    fileio.write_rgb_ppm(os.path.join(out, "flow_wheel.ppm"), wheel)
    if opt["figure"]:
        plots.save_plot_summary_png(
            pred, gt, opt["max_error"], os.path.join(out, "plot_summary.png")
        )
    print(f"wrote error_heatmap.ppm and flow_wheel.ppm to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are validation errors
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_global(sp) -> None:
    sp.add_argument("--seed", type=int, help="master random seed")
    sp.add_argument("--config", help="flat key=value option file")
    sp.add_argument("--out", help="output directory for this run")
    sp.add_argument("--threads", type=int, help="worker threads where supported")


def _add_model(sp) -> None:
    sp.add_argument("--channels", type=int, help="feature channels per branch")
    sp.add_argument("--heads", type=int, help="attention heads")
    sp.add_argument("--n-mmtm", type=int, help="gated fusion repeats")
    sp.add_argument("--z-max", type=float, help="depth normalization ceiling (m)")
    sp.add_argument(
        "--no-sa", action="store_true", help="disable self-attention entirely"
    )
    sp.add_argument(
        "--sa-rgb-only",
        action="store_true",
        help="self-attention on the color branch only",
    )
    sp.add_argument(
        "--no-ca", action="store_true", help="disable cross-attention exchange"
    )
    sp.add_argument(
        "--fusion", choices=("mmtm", "concat"), help="branch fusion mechanism"
    )
    sp.add_argument(
        "--rgb-only", action="store_true", help="drop the depth branch entirely"
    )
    sp.add_argument("--d-z", type=int, help="fusion bottleneck width (0 = half)")
    sp.add_argument("--corr-levels", type=int, help="correlation pyramid levels")
    sp.add_argument("--radius", type=int, help="correlation lookup radius")
    sp.add_argument("--iterations", type=int, help="refinement iterations")


def build_parser() -> _Parser:
    parser = _Parser(prog="rgbdflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", help="generate a synthetic RGB-D flow dataset")
    _add_global(sp)
    sp.add_argument("--count", type=int, help="number of sample pairs")
    sp.add_argument("--height", type=int)
    sp.add_argument("--width", type=int)
    sp.add_argument("--n-layers", type=int, help="moving rectangles per scene")
    sp.add_argument("--max-disp", type=float, help="largest per-axis offset (px)")
    sp.add_argument("--depth-min", type=float)
    sp.add_argument("--depth-max", type=float)
    sp.add_argument(
        "--fractional-offsets",
        action="store_true",
        help="draw subpixel offsets instead of integers",
    )
    _add_intrinsics(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("corrupt", help="apply a corruption setting to a dataset")
    _add_global(sp)
    sp.add_argument("--manifest", help="input dataset manifest")
    sp.add_argument("--setting", choices=("standard", "agn", "dark"))
    sp.add_argument("--sigma", type=float, help="noise std on the 0..255 scale")
    sp.set_defaults(func=cmd_corrupt)

    sp = sub.add_parser("train", help="train the flow model")
    _add_global(sp)
    sp.add_argument("--manifest", help="training dataset manifest")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float, help="initial learning rate")
    sp.add_argument("--optimizer", choices=("adam", "sgd"))
    sp.add_argument("--beta1", type=float)
    sp.add_argument("--beta2", type=float)
    sp.add_argument("--adam-eps", type=float)
    sp.add_argument("--clip-norm", type=float, help="global norm bound (0 = off)")
    sp.add_argument("--gamma", type=float, help="sequence loss decay base")
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--checkpoint-every", type=int)
    sp.add_argument(
        "--augment",
        choices=("none", "agn", "dark"),
        help="per-step corruption of training RGB",
    )
    sp.add_argument("--sigma", type=float, help="augment noise std (0..255 scale)")
    _add_model(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a predictor over a dataset")
    _add_global(sp)
    sp.add_argument("--manifest", help="evaluation dataset manifest")
    sp.add_argument("--checkpoint", help="trained parameter file")
    sp.add_argument(
        "--predictor",
        choices=("model", "zero", "gt"),
        help="what produces the 2-D flow",
    )
    sp.add_argument("--setting", help="free-form label copied into report rows")
    sp.add_argument("--fl-mode", choices=("or", "and"), help="outlier rule")
    sp.add_argument(
        "--eval-iterations",
        type=int,
        help="refinement iterations at test time (0 = checkpoint value)",
    )
    _add_intrinsics(sp)
    _add_model(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="verify gradients against differences")
    _add_global(sp)
    sp.add_argument("--size", type=int, help="square input extent")
    sp.add_argument(
        "--coords-per-param",
        type=int,
        help="coordinates swept per tensor (0 = all)",
    )
    sp.add_argument("--step-size", type=float, help="finite difference step")
    sp.add_argument("--tolerance", type=float, help="max relative error allowed")
    sp.add_argument(
        "--inject-bug",
        action="store_true",
        help="deliberately corrupt one backward rule; the check must fail",
    )
    _add_model(sp)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("plot", help="render error heatmap and flow wheel images")
    _add_global(sp)
    sp.add_argument("--pred", help="predicted flow (.flo)")
    sp.add_argument("--gt", help="ground-truth flow (.flo)")
    sp.add_argument(
        "--max-error", type=float, help="EPE that saturates the magenta ramp"
    )
    sp.add_argument(
        "--figure", action="store_true", help="also render a summary PNG figure"
    )
    sp.set_defaults(func=cmd_plot)

    # absent flags stay absent so the config-file layer can fill them in
    for action in sub.choices.values():
        for a in action._actions:
            if a.dest not in ("help",):
                a.default = argparse.SUPPRESS
    return parser


def _add_intrinsics(sp) -> None:
    sp.add_argument("--fx", type=float, help="focal length x (0 = max extent)")
    sp.add_argument("--fy", type=float, help="focal length y (0 = max extent)")
    sp.add_argument("--cx", type=float, help="principal point x (<0 = center)")
    sp.add_argument("--cy", type=float, help="principal point y (<0 = center)")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits; keep main() call-friendly
        return int(exc.code or 0)
    try:
        opt, provided = resolve_options(ns.command, ns)
        opt["_provided"] = provided
        return ns.func(opt)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CliError, FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
