"""Command-line surface: train, eval, export, stats, bench, gradcheck.

Configuration comes from an optional flat key=value file plus key=value
overrides on the command line; every run writes its resolved config next
to its outputs. Exit codes: 0 success, 1 usage/config error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import itertools
import sys
from pathlib import Path

import numpy as np

from . import bitkernel as BK
from . import data as D
from . import models as M
from . import report as R
from . import trainer as TR
from .autograd import SteKind, finite_diff_check, ste_grad
from .config import ConfigError, RunConfig, apply_kv, load_config
from .packfile import CHECKPOINT_MAGIC, FileFormatError, PACKED_MAGIC

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


def _build_model(cfg: RunConfig) -> M.Model:
    preset = M.PRESETS[cfg.model]
    policy = cfg.bin_policy()
    if cfg.model == "resnet20":
        spec = preset(policy, bireal_shortcuts=cfg.bireal)
    elif cfg.model == "vgg_small_lite":
        spec = preset(policy, full_width=cfg.full_width)
    else:
        spec = preset(policy)
    return M.build(spec, seed=cfg.seed, ste=cfg.ste_kind())


def _load_datasets(cfg: RunConfig):
    root = Path(cfg.data_root) if cfg.data_root else D.default_root()
    train = D.load(D.DatasetSource(kind=cfg.dataset, root=root, split="train"))
    test = D.load(D.DatasetSource(kind=cfg.dataset, root=root, split="test"))
    if cfg.limit_train:
        train = D.Dataset(train.kind, train.split, train.images[: cfg.limit_train],
                          train.labels[: cfg.limit_train])
    if cfg.limit_test:
        test = D.Dataset(test.kind, test.split, test.images[: cfg.limit_test],
                         test.labels[: cfg.limit_test])
    return train, test


def _write_run_files(cfg: RunConfig, out_dir: Path, metric_lines: list[str]):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.to_text())
    (out_dir / "metrics.log").write_text("\n".join(metric_lines) + "\n")
    if cfg.figures and metric_lines:
        R.save_training_curves(metric_lines, out_dir / "curves.png")


def cmd_train(cfg: RunConfig) -> int:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.to_text())
    train_ds, test_ds = _load_datasets(cfg)
    model = _build_model(cfg)
    norm = D.Normalizer.fit(train_ds)
    try:
        result = TR.train(model, train_ds, test_ds, cfg.optim_config(), normalizer=norm,
                          out_dir=out_dir,
                          log_fn=lambda lines: (out_dir / "metrics.log").write_text(
                              "\n".join(lines) + "\n"))
    except TR.TrainAbort as abort:
        sys.stderr.write(f"train aborted: {abort}\n")
        for line in abort.stats_lines:
            sys.stderr.write(line + "\n")
        return EXIT_RUNTIME
    _write_run_files(cfg, out_dir, result.metric_lines)
    print(f"run_dir={out_dir}")
    print(f"final_train_acc={result.final_train_acc * 100:.1f}")
    if result.final_test_acc:
        print(f"final_test_acc={result.final_test_acc * 100:.1f}")
    return EXIT_OK


def _sweep_values(sweep: str) -> tuple[str, list[str]]:
    if "=" not in sweep:
        raise ConfigError(f"--sweep expects key=v1,v2,..., got {sweep!r}")
    key, values = sweep.split("=", 1)
    return key, [v for v in values.split(",") if v]


def cmd_train_sweep(cfg: RunConfig, sweeps: list[str]) -> int:
    """Run the cartesian product of the swept keys, one run dir per combo."""
    axes = [_sweep_values(s) for s in sweeps]
    base_out = Path(cfg.out_dir)
    rc = EXIT_OK
    for combo in itertools.product(*(vals for _, vals in axes)):
        pairs = [f"{key}={val}" for (key, _), val in zip(axes, combo)]
        run_cfg = load_config(None)
        apply_kv(run_cfg, cfg.to_text().split())
        apply_kv(run_cfg, pairs)
        run_cfg.out_dir = str(base_out / "_".join(p.replace("=", "-") for p in pairs))
        run_cfg.validate()
        print(f"sweep: {' '.join(pairs)}")
        rc = max(rc, cmd_train(run_cfg))
    return rc


def _load_any_model(path: Path):
    """Returns (model, is_packed) for a checkpoint or packed-model file."""
    magic = open(path, "rb").read(4)
    if magic == PACKED_MAGIC:
        return TR.load_packed(path), True
    if magic == CHECKPOINT_MAGIC:
        model, _, _, _, _ = TR.load_checkpoint(path)
        return model, False
    raise FileFormatError(f"{path}: not a checkpoint or packed model")


def cmd_eval(model_path: Path, cfg: RunConfig, path_choice: str) -> int:
    model, is_packed = _load_any_model(model_path)
    exec_path = "packed" if is_packed else path_choice
    train_ds, test_ds = _load_datasets(cfg)
    norm = D.Normalizer.fit(train_ds)
    acc, loss = TR.evaluate(model, test_ds, norm, path=exec_path)
    print(f"path={exec_path} loss={loss:.4f}")
    print(f"accuracy={acc * 100:.1f}")
    return EXIT_OK


def cmd_stats(model_path: Path, cfg: RunConfig, layers: list[str] | None) -> int:
    model, is_packed = _load_any_model(model_path)
    train_ds, test_ds = _load_datasets(cfg)
    norm = D.Normalizer.fit(train_ds)
    batch = next(iter(D.batches(test_ds, min(256, len(test_ds)), shuffle_seed=None,
                                normalizer=norm)))
    path = "packed" if is_packed else "surrogate"
    _, stats = M.forward(model, batch.images, mode="eval", path=path, collect_stats=True)
    if layers:
        stats = {k: v for k, v in stats.items() if k in layers}
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"layer={name} {st.as_kv()}" for name, st in stats.items()]
    (out_dir / "stats.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    if cfg.figures and stats:
        R.save_stats_figure(stats, out_dir / "stats.png")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, reps: int) -> int:
    results = BK.bench(reps=reps, seed=cfg.seed)
    lines = BK.bench_report_lines(results)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "bench.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    if cfg.figures:
        R.save_bench_figure(results, out_dir / "bench.png")
    return EXIT_OK


_CLASS_LABELS = {
    "weight": "latent_weights",
    "bias": "bias",
    "bn_gamma": "bn_gamma",
    "bn_beta": "bn_beta",
    "asd_raw": "activation_shift_raw",
    "wsd_raw": "weight_shift_raw",
    "psi_w": "shift_head_weights",
    "psi_b": "shift_head_bias",
    "scale": "learned_scale",
}


def run_gradcheck(cfg: RunConfig, tol: float = 1e-4, batch: int = 3) -> tuple[bool, list[str]]:
    """Finite-difference check of the two-block model in float64 smooth mode.

    Returns (passed, report lines).
    """
    from . import autograd as ag

    spec = M.micro2()
    model = M.build(spec, seed=cfg.seed, ste=cfg.ste_kind(), dtype=np.float64)
    rng = np.random.default_rng(cfg.seed + 1)
    images = rng.standard_normal((batch, 2, 6, 6))
    labels = rng.integers(0, 4, batch)

    def loss_fn():
        logits = M.forward(model, images, mode="eval", path="surrogate", smooth=True)
        return ag.softmax_cross_entropy(logits, labels)

    report = finite_diff_check(loss_fn, model.params, eps=1e-6, max_coords=6,
                               seed=cfg.seed)
    # estimator derivative vs closed form, checked exactly
    xs = np.array([-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0])
    clip_expect = np.array([0, 1, 1, 1, 1, 1, 0], dtype=float)
    approx_expect = np.array([0, 0, 1, 2, 1, 0, 0], dtype=float)
    ste_ok = (np.array_equal(ste_grad(xs, SteKind.ClipSte), clip_expect)
              and np.array_equal(ste_grad(xs, SteKind.ApproxSign), approx_expect))

    by_class: dict[str, float] = {}
    for name, err in report.per_param.items():
        kind = model.params[name].kind
        by_class[kind] = max(err, by_class.get(kind, 0.0))
    lines = []
    ok = ste_ok
    for kind in sorted(by_class):
        err = by_class[kind]
        status = "pass" if err <= tol else "FAIL"
        ok = ok and err <= tol
        lines.append(f"class={_CLASS_LABELS.get(kind, kind)} max_rel_err={err:.3e} "
                     f"tol={tol:g} status={status}")
    lines.append(f"class=ste_closed_form status={'pass' if ste_ok else 'FAIL'}")
    return ok, lines


def cmd_gradcheck(cfg: RunConfig) -> int:
    ok, lines = run_gradcheck(cfg)
    for line in lines:
        print(line)
    print(f"gradcheck={'pass' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def _config_keys_epilog() -> str:
    from dataclasses import fields

    from .config import RunConfig

    keys = ", ".join(f.name for f in fields(RunConfig))
    return (f"config keys (file lines or key=value overrides): {keys}. "
            f"Dataset root falls back to ${D.DATA_ROOT_ENV} then ./data.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdbnn",
        description="1-bit neural network engine with learnable sign-distribution shifts",
        epilog=_config_keys_epilog(),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("-c", "--config", type=Path, default=None,
                       help="flat key=value config file")
        p.add_argument("overrides", nargs="*", metavar="key=value",
                       help="config overrides applied after the file")

    p_train = sub.add_parser("train", help="train a model; writes a run directory")
    add_common(p_train)
    p_train.add_argument("--sweep", action="append", default=[],
                         metavar="key=v1,v2", help="grid over config values (repeatable)")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint or packed model")
    p_eval.add_argument("model_file", type=Path)
    p_eval.add_argument("--path", choices=("surrogate", "packed"), default="surrogate")
    add_common(p_eval)

    p_export = sub.add_parser("export", help="export a checkpoint to a packed 1-bit model")
    p_export.add_argument("checkpoint", type=Path)
    p_export.add_argument("-o", "--output", type=Path, required=True)

    p_stats = sub.add_parser("stats", help="per-layer sign-distribution table")
    p_stats.add_argument("model_file", type=Path)
    p_stats.add_argument("--layers", type=str, default=None,
                         help="comma-separated layer filter")
    add_common(p_stats)

    p_bench = sub.add_parser("bench", help="latency comparison of the conv kernels")
    p_bench.add_argument("--reps", type=int, default=7)
    add_common(p_bench)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    add_common(p_grad)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "export":
            model, _, _, _, _ = TR.load_checkpoint(args.checkpoint)
            TR.export_packed(args.output, model)
            print(f"packed={args.output}")
            return EXIT_OK
        cfg = load_config(args.config, args.overrides)
        if args.command == "train":
            if args.sweep:
                return cmd_train_sweep(cfg, args.sweep)
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(args.model_file, cfg, args.path)
        if args.command == "stats":
            layers = args.layers.split(",") if args.layers else None
            return cmd_stats(args.model_file, cfg, layers)
        if args.command == "bench":
            return cmd_bench(cfg, args.reps)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        parser.error(f"unknown command {args.command!r}")
    except (ConfigError, FileNotFoundError, FileFormatError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except (TR.TrainAbort, M.UnsupportedModeError, ValueError) as exc:
        sys.stderr.write(f"runtime failure: {exc}\n")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
