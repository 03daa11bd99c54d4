"""Command-line entry point.

Experiments are described by a JSON config file (the reproducibility
artifact); flags select the subcommand, point at files, and override a few
scalar fields.  Every run writes a ``report.json`` embedding its resolved
config and seeds, so a run is reproducible from its report alone.  Report
paths also render PNG figures next to the CSV/JSON outputs unless
``--no-figures`` is given.

Exit codes: 0 success, 1 configuration error, 2 runtime error.  Errors go
to stderr with a machine-parsable ``[MLKD:CONFIG]`` / ``[MLKD:RUNTIME]``
prefix.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data import Dataset, GeneratorSpec, generate_synthetic, load_dataset, save_dataset, split
from .errors import ConfigurationError, DataError, MLKDError
from .evaluation import (
    EvalReport,
    ProbeConfig,
    cka_similarity,
    export_features,
    knn_classify,
    linear_probe,
    top1_accuracy,
    topk_accuracy,
)
from .infobound import gaussian_mi, make_gaussian_critic, mi_lower_bound, sample_gaussian_pairs
from .losses import LossWeights
from .networks import ArchSpec, Checkpoint, forward_features, forward_logits
from .quantification import EntropyConfig, estimate_pixel_entropy, view_consistency
from .training import DistillConfig, distill, pretrain_teacher

FEWSHOT_FRACTIONS = (0.25, 0.5, 0.75, 1.0)

# the seven loss combinations exercised by the ablation command
ABLATION_ROWS = (
    ("Align", ("align",)),
    ("Corr", ("corr",)),
    ("Sup", ("sup",)),
    ("Align+Sup", ("align", "sup")),
    ("Corr+Sup", ("corr", "sup")),
    ("Align+Corr", ("align", "corr")),
    ("All", ("align", "corr", "sup")),
)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as configuration errors."""

    def error(self, message):
        raise ConfigurationError(message)


# -- config file handling ----------------------------------------------------


_CONFIG_KEYS = {
    "seed", "epochs", "batch_size", "initial_lr", "lr_decay_epochs",
    "lr_decay_factor", "momentum", "weight_decay", "loss_weights",
    "transform_multiplier", "teacher_kind", "few_shot_fraction",
    "teacher_arch", "student_arch", "dataset", "eval_modes",
}
_WEIGHT_KEYS = set(LossWeights.__dataclass_fields__)
_DATASET_KEYS = {"train", "eval"}


def load_experiment_config(path) -> DistillConfig:
    """Parse and validate a JSON experiment config; unknown keys are rejected."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")

    weights_raw = raw.get("loss_weights", {})
    unknown = set(weights_raw) - _WEIGHT_KEYS
    if unknown:
        raise ConfigurationError(f"unknown loss_weights keys: {sorted(unknown)}")
    weights = LossWeights(**weights_raw)

    dataset_raw = raw.get("dataset", {})
    unknown = set(dataset_raw) - _DATASET_KEYS
    if unknown:
        raise ConfigurationError(f"unknown dataset keys: {sorted(unknown)}")

    def parse_arch(key):
        if key not in raw or raw[key] is None:
            return None
        try:
            return ArchSpec.from_json(raw[key])
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed {key}: {exc}") from exc

    cfg = DistillConfig(
        seed=int(raw.get("seed", 0)),
        epochs=int(raw.get("epochs", DistillConfig.epochs)),
        batch_size=int(raw.get("batch_size", DistillConfig.batch_size)),
        initial_lr=float(raw.get("initial_lr", DistillConfig.initial_lr)),
        lr_decay_epochs=tuple(raw.get("lr_decay_epochs", DistillConfig.lr_decay_epochs)),
        lr_decay_factor=float(raw.get("lr_decay_factor", DistillConfig.lr_decay_factor)),
        momentum=float(raw.get("momentum", DistillConfig.momentum)),
        weight_decay=float(raw.get("weight_decay", DistillConfig.weight_decay)),
        weights=weights,
        transform_multiplier=float(raw.get("transform_multiplier", DistillConfig.transform_multiplier)),
        teacher_kind=str(raw.get("teacher_kind", DistillConfig.teacher_kind)),
        few_shot_fraction=float(raw.get("few_shot_fraction", DistillConfig.few_shot_fraction)),
        teacher_arch=parse_arch("teacher_arch"),
        student_arch=parse_arch("student_arch"),
        dataset_paths=dict(dataset_raw),
    )
    try:
        cfg.validate()
    except MLKDError as exc:
        raise ConfigurationError(str(exc)) from exc
    return cfg


def config_to_dict(cfg: DistillConfig) -> dict:
    out = {
        "seed": cfg.seed, "epochs": cfg.epochs, "batch_size": cfg.batch_size,
        "initial_lr": cfg.initial_lr,
        "lr_decay_epochs": list(cfg.lr_decay_epochs),
        "lr_decay_factor": cfg.lr_decay_factor, "momentum": cfg.momentum,
        "weight_decay": cfg.weight_decay,
        "loss_weights": asdict(cfg.weights),
        "transform_multiplier": cfg.transform_multiplier,
        "teacher_kind": cfg.teacher_kind,
        "few_shot_fraction": cfg.few_shot_fraction,
        "dataset": dict(cfg.dataset_paths),
    }
    out["teacher_arch"] = cfg.teacher_arch.to_json() if cfg.teacher_arch else None
    out["student_arch"] = cfg.student_arch.to_json() if cfg.student_arch else None
    return out


def _apply_overrides(cfg: DistillConfig, args) -> DistillConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    if getattr(args, "fraction", None) is not None:
        cfg.few_shot_fraction = args.fraction
    cfg.validate()
    return cfg


def _load_datasets(cfg: DistillConfig) -> tuple[Dataset, Dataset | None]:
    paths = cfg.dataset_paths
    if "train" not in paths:
        raise ConfigurationError("config dataset.train path is required")
    train = load_dataset(paths["train"])
    eval_ds = load_dataset(paths["eval"]) if "eval" in paths else None
    return train, eval_ds


def _jsonable(value):
    """Replace non-finite floats with null so reports stay strict JSON."""
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def _write_report(out_dir: Path, payload: dict) -> Path:
    path = out_dir / "report.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
    return path


def _features(ckpt: Checkpoint, ds: Dataset) -> np.ndarray:
    net = ckpt.to_network(trainable=False)
    if ds.input_width != net.spec.input_dim:
        raise ConfigurationError(
            f"dataset width {ds.input_width} does not match checkpoint input "
            f"{net.spec.input_dim}")
    return forward_features(net, ds.flat_inputs()).data


def _logits(ckpt: Checkpoint, ds: Dataset) -> np.ndarray:
    net = ckpt.to_network(trainable=False)
    feats = forward_features(net, ds.flat_inputs())
    return forward_logits(net, feats).data


# -- subcommand handlers -------------------------------------------------------


def _cmd_gen_data(args) -> int:
    try:
        with open(args.spec, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"bad generator spec: {exc}") from exc
    splits = raw.pop("splits", None)
    spec = GeneratorSpec.from_json(raw)
    ds = generate_synthetic(spec, args.seed)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = {}
    if splits:
        names = list(splits)
        parts = split(ds, [splits[n] for n in names], args.seed)
        for name, part in zip(names, parts):
            path = out_dir / f"{name}.mlkd"
            save_dataset(part, path)
            outputs[name] = str(path)
    else:
        path = out_dir / "data.mlkd"
        save_dataset(ds, path)
        outputs["data"] = str(path)
    _write_report(out_dir, {
        "command": "gen-data", "seed": args.seed,
        "generator": spec.to_json(), "splits": splits, "outputs": outputs,
        "samples": len(ds),
    })
    print(json.dumps(_jsonable(outputs)))
    return 0


def _run_and_save(kind: str, cfg: DistillConfig, args,
                  teacher: Checkpoint | None = None) -> int:
    train, eval_ds = _load_datasets(cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if kind == "pretrain":
        ckpt, log = pretrain_teacher(cfg, train, eval_ds)
        ckpt_path = out_dir / "teacher.ckpt"
    else:
        ckpt, log = distill(cfg, teacher, train, eval_ds)
        ckpt_path = out_dir / "student.ckpt"
    ckpt.save(ckpt_path)
    log_path = out_dir / "train_log.csv"
    log.to_csv(log_path)

    outputs = {"checkpoint": str(ckpt_path), "train_log": str(log_path)}
    if not args.no_figures:
        from .figures import plot_train_log
        fig_path = out_dir / "train_curves.png"
        plot_train_log(log, fig_path)
        outputs["figure"] = str(fig_path)

    last = log.records[-1]
    report = {
        "command": kind,
        "config": config_to_dict(cfg),
        "teacher": getattr(args, "teacher", None),
        "outputs": outputs,
        "results": {
            "final_train_acc": last.train_acc,
            "final_eval_acc": last.eval_acc,
            "final_total_loss": last.total,
        },
    }
    _write_report(out_dir, report)
    print(json.dumps(_jsonable(report["results"])))
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _apply_overrides(load_experiment_config(args.config), args)
    return _run_and_save("pretrain", cfg, args)


def _cmd_distill(args) -> int:
    cfg = _apply_overrides(load_experiment_config(args.config), args)
    teacher = Checkpoint.load(args.teacher)
    return _run_and_save("distill", cfg, args, teacher=teacher)


def _cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    data = load_dataset(args.data)
    if data.labels is None and args.mode != "cka":
        raise DataError("evaluation dataset must be labeled")
    seed = args.seed or 0

    if args.mode == "top1":
        logits = _logits(ckpt, data)
        report = EvalReport(mode="top1", top1=top1_accuracy(logits, data.labels),
                            n_test=len(data), seed=seed)
        if logits.shape[1] >= 5:
            report.top5 = topk_accuracy(logits, data.labels, 5)
        preds = np.argmax(logits, axis=1)
        report.per_class = [
            float(np.mean(preds[data.labels == c] == c))
            if np.any(data.labels == c) else None
            for c in range(data.class_count)
        ]
    elif args.mode == "knn":
        if not args.train_data:
            raise ConfigurationError("--train-data is required for knn evaluation")
        train = load_dataset(args.train_data)
        preds = knn_classify(_features(ckpt, train), train.labels,
                             _features(ckpt, data), k=args.k)
        report = EvalReport(mode="knn", top1=float(np.mean(preds == data.labels)),
                            n_test=len(data), seed=seed)
    elif args.mode in ("linear", "transfer"):
        if not args.train_data:
            raise ConfigurationError(f"--train-data is required for {args.mode} evaluation")
        train = load_dataset(args.train_data)
        probe = ProbeConfig(seed=seed)
        acc = linear_probe(_features(ckpt, train), train.labels,
                           _features(ckpt, data), data.labels, probe)
        report = EvalReport(mode=args.mode, top1=acc, n_test=len(data), seed=seed)
    elif args.mode == "cka":
        if not args.teacher:
            raise ConfigurationError("--teacher is required for cka evaluation")
        teacher = Checkpoint.load(args.teacher)
        value = cka_similarity(_features(ckpt, data), _features(teacher, data),
                               kernel=args.kernel)
        report = EvalReport(mode="cka", top1=value, n_test=len(data), seed=seed)
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigurationError(f"unknown eval mode {args.mode!r}")

    if args.export_features:
        export_features(_features(ckpt, data), data.labels, args.export_features,
                        class_count=data.class_count)

    payload = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(json.dumps(_jsonable(payload)))
    return 0


def _cmd_quantify(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    net = ckpt.to_network(trainable=False)
    data = load_dataset(args.data)
    if data.input_width != net.spec.input_dim:
        raise ConfigurationError(
            f"dataset width {data.input_width} does not match checkpoint "
            f"input {net.spec.input_dim}")
    count = min(args.count, len(data))
    rng = np.random.default_rng(args.seed)
    picked = np.sort(rng.choice(len(data), size=count, replace=False))

    cfg = EntropyConfig(seed=args.seed)
    if args.steps:
        cfg.steps = args.steps
    if args.draws:
        cfg.draws = args.draws

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_image = []
    first_map = None
    for rank, index in enumerate(picked):
        image = data.inputs[index].astype(np.float64)
        emap = estimate_pixel_entropy(net, image, cfg)
        iou, _, _ = view_consistency(net, image, cfg, seed=args.seed + 17 * rank)
        if first_map is None:
            first_map = emap
        csv_path = out_dir / f"entropy_{int(index):05d}.csv"
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("pixel,sigma,entropy,concept\n")
            flat_sigma = emap.sigma.reshape(-1)
            flat_h = emap.entropy.reshape(-1)
            flat_mask = emap.concept_mask.reshape(-1)
            for i in range(flat_sigma.size):
                fh.write(f"{i},{flat_sigma[i]:.17g},{flat_h[i]:.17g},{int(flat_mask[i])}\n")
        per_image.append({
            "index": int(index), "mean_entropy": emap.mean_entropy,
            "iou": iou, "warning": bool(emap.warning), "csv": str(csv_path),
        })

    outputs = {"images": per_image}
    if not args.no_figures and first_map is not None:
        from .figures import plot_entropy_map
        fig_path = out_dir / "entropy_map.png"
        plot_entropy_map(first_map, fig_path)
        outputs["figure"] = str(fig_path)

    report = {
        "command": "quantify", "checkpoint": args.checkpoint,
        "data": args.data, "seed": args.seed,
        "entropy_config": asdict(cfg),
        "results": {
            "mean_entropy": float(np.mean([r["mean_entropy"] for r in per_image])),
            "mean_iou": float(np.mean([r["iou"] for r in per_image])),
        },
        "outputs": outputs,
    }
    _write_report(out_dir, report)
    print(json.dumps(_jsonable(report["results"])))
    return 0


def _parse_seeds(arg: str | None, default: int) -> list[int]:
    if not arg:
        return [default]
    try:
        return [int(s) for s in arg.split(",") if s.strip() != ""]
    except ValueError as exc:
        raise ConfigurationError(f"bad seed list {arg!r}") from exc


def _cmd_fewshot(args) -> int:
    cfg = load_experiment_config(args.config)
    teacher = Checkpoint.load(args.teacher)
    train, eval_ds = _load_datasets(cfg)
    if eval_ds is None:
        raise ConfigurationError("fewshot needs config dataset.eval for accuracy")
    seeds = _parse_seeds(args.seeds, cfg.seed)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    table = np.zeros((len(seeds), len(FEWSHOT_FRACTIONS)))
    for i, seed in enumerate(seeds):
        for j, fraction in enumerate(FEWSHOT_FRACTIONS):
            run_cfg = load_experiment_config(args.config)
            run_cfg.seed = seed
            run_cfg.few_shot_fraction = fraction
            ckpt, _ = distill(run_cfg, teacher, train, None)
            acc = top1_accuracy(_logits(ckpt, eval_ds), eval_ds.labels)
            table[i, j] = acc
            rows.append((fraction, seed, acc))

    csv_path = out_dir / "results.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("fraction,seed,top1\n")
        for fraction, seed, acc in rows:
            fh.write(f"{fraction},{seed},{acc:.17g}\n")

    outputs = {"results": str(csv_path)}
    if not args.no_figures:
        from .figures import plot_fewshot
        fig_path = out_dir / "fewshot.png"
        plot_fewshot(FEWSHOT_FRACTIONS, table, fig_path)
        outputs["figure"] = str(fig_path)

    report = {
        "command": "fewshot", "config": config_to_dict(cfg),
        "teacher": args.teacher, "seeds": seeds,
        "fractions": list(FEWSHOT_FRACTIONS),
        "results": {
            "mean_top1": {str(f): float(table[:, j].mean())
                          for j, f in enumerate(FEWSHOT_FRACTIONS)},
        },
        "outputs": outputs,
    }
    _write_report(out_dir, report)
    print(json.dumps(_jsonable(report["results"])))
    return 0


def _weights_for_row(base: LossWeights, parts: tuple[str, ...]) -> LossWeights:
    w = LossWeights(**asdict(base))
    w.lambda1 = base.lambda1 if "align" in parts else 0.0
    w.lambda2 = base.lambda2 if "corr" in parts else 0.0
    w.w_sup = base.w_sup if "sup" in parts else 0.0
    w.w_kd = 0.0
    return w


def _cmd_ablate(args) -> int:
    cfg = load_experiment_config(args.config)
    teacher = Checkpoint.load(args.teacher)
    train, eval_ds = _load_datasets(cfg)
    if eval_ds is None:
        raise ConfigurationError("ablate needs config dataset.eval for accuracy")
    seeds = _parse_seeds(args.seeds, cfg.seed)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    means, detail = [], {}
    for name, parts in ABLATION_ROWS:
        accs = []
        for seed in seeds:
            run_cfg = load_experiment_config(args.config)
            run_cfg.seed = seed
            run_cfg.weights = _weights_for_row(cfg.weights, parts)
            ckpt, _ = distill(run_cfg, teacher, train, None)
            accs.append(top1_accuracy(_logits(ckpt, eval_ds), eval_ds.labels))
        means.append(float(np.mean(accs)))
        detail[name] = accs

    csv_path = out_dir / "results.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("combination,mean_top1,seeds\n")
        for (name, _), mean in zip(ABLATION_ROWS, means):
            fh.write(f"{name},{mean:.17g},{len(seeds)}\n")

    outputs = {"results": str(csv_path)}
    if not args.no_figures:
        from .figures import plot_ablation
        fig_path = out_dir / "ablation.png"
        plot_ablation([name for name, _ in ABLATION_ROWS], means, fig_path)
        outputs["figure"] = str(fig_path)

    report = {
        "command": "ablate", "config": config_to_dict(cfg),
        "teacher": args.teacher, "seeds": seeds,
        "results": {name: {"mean_top1": mean, "per_seed": detail[name]}
                    for (name, _), mean in zip(ABLATION_ROWS, means)},
        "outputs": outputs,
    }
    _write_report(out_dir, report)
    print(json.dumps(_jsonable({name: mean for (name, _), mean in zip(ABLATION_ROWS, means)})))
    return 0


def _cmd_boundcheck(args) -> int:
    try:
        rhos = [float(r) for r in args.rhos.split(",")]
    except ValueError as exc:
        raise ConfigurationError(f"bad rho list {args.rhos!r}") from exc
    tolerance = 0.05
    results, ok = [], True
    for rho in rhos:
        mi = gaussian_mi(rho)
        samples = sample_gaussian_pairs(rho, args.samples, args.samples, seed=args.seed)
        critic = make_gaussian_critic(rho, args.samples, args.samples)
        bound = mi_lower_bound(samples, critic)
        passed = bound <= mi + tolerance
        ok = ok and passed
        results.append({"rho": rho, "analytic_mi": mi, "bound": bound,
                        "passed": bool(passed)})

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = {}
    if not args.no_figures:
        from .figures import plot_bound_check
        fig_path = out_dir / "bound_check.png"
        plot_bound_check([r["rho"] for r in results],
                         [r["bound"] for r in results],
                         [r["analytic_mi"] for r in results], fig_path)
        outputs["figure"] = str(fig_path)

    _write_report(out_dir, {
        "command": "boundcheck", "seed": args.seed, "samples": args.samples,
        "tolerance": tolerance, "results": results, "outputs": outputs,
    })
    print(json.dumps(_jsonable(results)))
    if not ok:
        raise MLKDError("mutual-information bound exceeded the analytic value")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="mlkd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="generator spec JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=_cmd_gen_data)

    for name, handler in (("pretrain", _cmd_pretrain), ("distill", _cmd_distill)):
        p = sub.add_parser(name, help=f"{name} a network per the config")
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--epochs", type=int, default=None, help="override config epochs")
        p.add_argument("--fraction", type=float, default=None,
                       help="override few-shot fraction")
        p.add_argument("--no-figures", action="store_true")
        if name == "distill":
            p.add_argument("--teacher", required=True, help="teacher checkpoint")
        p.set_defaults(handler=handler)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--mode", required=True,
                   choices=("top1", "knn", "linear", "transfer", "cka"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="evaluation dataset")
    p.add_argument("--train-data", default=None, help="training dataset (knn/linear/transfer)")
    p.add_argument("--teacher", default=None, help="teacher checkpoint (cka)")
    p.add_argument("--kernel", default="rbf", choices=("linear", "rbf"))
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="write the report JSON here")
    p.add_argument("--export-features", default=None,
                   help="also write evaluated features to this container file")
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("quantify", help="entropy maps and view-consistency IoU")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--draws", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(handler=_cmd_quantify)

    p = sub.add_parser("fewshot", help="distill at 25/50/75/100% of the data")
    p.add_argument("--config", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--seeds", default=None, help="comma-separated seeds")
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(handler=_cmd_fewshot)

    p = sub.add_parser("ablate", help="run the seven loss-combination rows")
    p.add_argument("--config", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--seeds", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(handler=_cmd_ablate)

    p = sub.add_parser("boundcheck", help="verify the MI bound on Gaussian pairs")
    p.add_argument("--rhos", default="0,0.5,0.9")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(handler=_cmd_boundcheck)

    return parser


def run(argv=None) -> int:
    """Dispatch one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except ConfigurationError as exc:
        print(f"[MLKD:CONFIG] {exc}", file=sys.stderr)
        return 1
    except MLKDError as exc:
        print(f"[MLKD:{exc.code}] {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"[MLKD:RUNTIME] {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
