"""Command-line front end: data generation, training, evaluation, ablation
grids, gradient checking, parameter accounting, and relevance rendering.

Config resolution order is defaults < preset < JSON file < flags. The
effective config is echoed to the output directory as JSON; replaying a
command with that file and no extra flags reproduces the run.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .binio import FileFormatError
from .checkpoint import load_into
from .data import FeatureDataset, gen_clusters, gen_xor, read_features, split_dataset, write_features
from .metrics import round_percent, write_confusion_csv, write_metrics_csv
from .model import (
    TWO_STREAM_VARIANTS,
    VARIANTS,
    ModelConfig,
    build_params,
    count_params,
    estimate_flops,
    forward,
)
from .relevance import (
    capture_attention,
    near_square_layout,
    render_map,
    stream_relevance,
    write_pgm,
    write_scores_csv,
)
from .tensor import ShapeError, Tensor, finite_diff_check
from .training import TrainConfig, evaluate, label_smoothing_ce, train_loop


@dataclass
class RunConfig:
    """Flat union of the model and training knobs, one JSON key per field."""

    patches: int = 68
    base_dim: int = 512
    pyramid_dims: tuple = (512, 256, 128)
    depth: int = 8
    mlp_ratio: int = 2
    drop_path: float = 0.01
    heads_divisor: int = 64
    swap_depth: int | None = None
    num_classes: int = 7
    variant: str = "poster"
    label_smoothing: float = 0.1
    qkv_bias: bool = True
    pre_msa_norm: bool = False
    share_unswapped: bool = False
    head_hidden: int | None = None
    seed: int = 0
    batch_size: int = 100
    learning_rate: float = 4e-5
    steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 0

    def model_config(self, **overrides) -> ModelConfig:
        d = {
            "patches": self.patches,
            "base_dim": self.base_dim,
            "pyramid_dims": self.pyramid_dims,
            "depth": self.depth,
            "mlp_ratio": self.mlp_ratio,
            "drop_path": self.drop_path,
            "heads_divisor": self.heads_divisor,
            "swap_depth": self.swap_depth,
            "num_classes": self.num_classes,
            "variant": self.variant,
            "label_smoothing": self.label_smoothing,
            "qkv_bias": self.qkv_bias,
            "pre_msa_norm": self.pre_msa_norm,
            "share_unswapped": self.share_unswapped,
            "head_hidden": self.head_hidden,
            "seed": self.seed,
        }
        d.update(overrides)
        return ModelConfig.from_dict(d)

    def train_config(self, **overrides) -> TrainConfig:
        d = {
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "steps": self.steps,
            "label_smoothing": None,  # fall through to the model config value
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
        }
        d.update(overrides)
        return TrainConfig(**d)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["pyramid_dims"] = list(self.pyramid_dims)
        return out


_CONFIG_KEYS = tuple(f.name for f in fields(RunConfig))

PRESETS = {
    # desk: the small everything-checkable configuration used by the tests
    "desk": {
        "patches": 8,
        "base_dim": 32,
        "pyramid_dims": (32, 16, 8),
        "depth": 2,
        "heads_divisor": 16,
        "num_classes": 7,
        "batch_size": 64,
        "learning_rate": 2e-3,
        "steps": 300,
    },
}


class CliError(Exception):
    pass


def _parse_dims(value) -> tuple:
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    try:
        return tuple(int(v) for v in str(value).split(",") if v.strip())
    except ValueError:
        raise CliError(f"cannot parse pyramid dims from {value!r}") from None


def resolve_config(args) -> RunConfig:
    values = {f.name: f.default for f in fields(RunConfig)}
    preset = getattr(args, "preset", None)
    if preset:
        values.update(PRESETS[preset])
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path) as f:
            loaded = json.load(f)
        unknown = set(loaded) - set(_CONFIG_KEYS)
        if unknown:
            raise CliError(f"unknown config keys in {config_path}: {sorted(unknown)}")
        values.update(loaded)
    for key in _CONFIG_KEYS:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            values[key] = flag_value
    values["pyramid_dims"] = _parse_dims(values["pyramid_dims"])
    if values.get("swap_depth", None) is not None and values["swap_depth"] < 0:
        values["swap_depth"] = None
    cfg = RunConfig(**values)
    cfg.model_config()  # validate eagerly so bad configs fail before any work
    return cfg


def write_effective_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "effective_config.json", "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def _add_config_flags(parser) -> None:
    g = parser.add_argument_group("config", "defaults < --preset < --config file < flags")
    g.add_argument("--config", type=Path, help="JSON config file")
    g.add_argument("--preset", choices=sorted(PRESETS), help="named base configuration")
    g.add_argument("--patches", type=int)
    g.add_argument("--base-dim", dest="base_dim", type=int)
    g.add_argument("--pyramid-dims", dest="pyramid_dims", type=str, help="comma separated, e.g. 512,256,128")
    g.add_argument("--depth", type=int)
    g.add_argument("--mlp-ratio", dest="mlp_ratio", type=int)
    g.add_argument("--drop-path", dest="drop_path", type=float)
    g.add_argument("--heads-divisor", dest="heads_divisor", type=int)
    g.add_argument("--swap-depth", dest="swap_depth", type=int, help="-1 means swap in every block")
    g.add_argument("--num-classes", dest="num_classes", type=int)
    g.add_argument("--variant", choices=VARIANTS)
    g.add_argument("--label-smoothing", dest="label_smoothing", type=float)
    g.add_argument("--qkv-bias", dest="qkv_bias", action=argparse.BooleanOptionalAction)
    g.add_argument("--pre-msa-norm", dest="pre_msa_norm", action=argparse.BooleanOptionalAction)
    g.add_argument("--share-unswapped", dest="share_unswapped", action=argparse.BooleanOptionalAction)
    g.add_argument("--head-hidden", dest="head_hidden", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    g.add_argument("--steps", type=int)
    g.add_argument("--beta1", type=float)
    g.add_argument("--beta2", type=float)
    g.add_argument("--adam-eps", dest="adam_eps", type=float)
    g.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)


def _load_features(path) -> FeatureDataset:
    path = Path(path)
    if not path.exists():
        raise CliError(f"data file not found: {path}")
    return read_features(path)


def _save_model_sidecar(ckpt_path: Path, mcfg: ModelConfig) -> None:
    with open(str(ckpt_path) + ".json", "w") as f:
        json.dump(mcfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def _load_model_from_checkpoint(ckpt_path):
    ckpt_path = Path(ckpt_path)
    if not ckpt_path.exists():
        raise CliError(f"checkpoint not found: {ckpt_path}")
    sidecar = Path(str(ckpt_path) + ".json")
    if not sidecar.exists():
        raise CliError(f"missing model config sidecar: {sidecar}")
    with open(sidecar) as f:
        mcfg = ModelConfig.from_dict(json.load(f))
    params = build_params(mcfg)
    load_into(params, ckpt_path)
    return params, mcfg


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.task == "clusters":
        ds = gen_clusters(args.p, args.d, args.classes, args.count, args.sigma, args.seed)
    else:
        if args.classes not in (None, 2):
            raise CliError("xor data is binary; drop --classes or pass 2")
        ds = gen_xor(args.p, args.d, args.count, args.sigma, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_features(ds, out)
    print(f"wrote {len(ds)} samples (P={ds.patches}, D={ds.dim}, classes={ds.num_classes}) to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    train_ds = _load_features(args.data)
    out_dir = Path(args.out)
    write_effective_config(cfg, out_dir)
    mcfg = cfg.model_config()
    tcfg = cfg.train_config()
    result = train_loop(mcfg, tcfg, train_ds, out_dir=out_dir)
    _save_model_sidecar(result.checkpoint_path, mcfg)
    print(f"trained {mcfg.variant} for {tcfg.steps} steps, final loss {result.log[-1][1]:.6f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    params, mcfg = _load_model_from_checkpoint(args.checkpoint)
    ds = _load_features(args.data)
    report = evaluate(params, mcfg, ds)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_confusion_csv(report.confusion, out_dir / "confusion.csv")
    write_metrics_csv(report, out_dir / "metrics.csv")
    with open(out_dir / "prediction_percent.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["truth\\pred"] + report.confusion.class_names)
        for i, name in enumerate(report.confusion.class_names):
            row = round_percent(report.row_percentages[i])
            writer.writerow([name] + [f"{v:.2f}" for v in row])
    print(f"accuracy {100*report.accuracy:.2f}%  mean class accuracy {100*report.mean_class_accuracy:.2f}%")
    return 0


def _stable_seed(master: int, label: str, seed_index: int) -> int:
    digest = hashlib.sha256(f"{master}:{label}:{seed_index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def grid_cells(name: str, cfg: RunConfig) -> list:
    """(label, model-config overrides) pairs for one ablation grid."""
    if name == "table4":
        return [(v, {"variant": v}) for v in VARIANTS]
    if name == "pyramid":
        chains = []
        for k in range(1, 5):
            dims = tuple(cfg.base_dim // (2**j) for j in range(k))
            if any(d < 1 for d in dims) or len(set(dims)) != len(dims):
                raise CliError(f"base_dim {cfg.base_dim} cannot form a {k}-level pyramid")
            chains.append(dims)
        return [(f"levels_{'x'.join(str(d) for d in dims)}", {"variant": "poster", "pyramid_dims": dims}) for dims in chains]
    if name == "swapdepth":
        rows = [("no_swap", 0), ("swap_first_1", 1), ("swap_first_2", 2), ("swap_first_4", 4), ("swap_all", None)]
        cells = []
        for label, k in rows:
            value = cfg.depth if k is None else min(k, cfg.depth)
            cells.append((label, {"variant": "poster", "swap_depth": value}))
        return cells
    if name == "depth":
        return [(f"depth_{k}", {"depth": k, "swap_depth": None}) for k in (1, 2, 4, 6, 8)]
    raise CliError(f"unknown grid {name!r}")


def _run_cell(cfg: RunConfig, label: str, overrides: dict, seed_index: int, train_ds, test_ds):
    cell_seed = _stable_seed(cfg.seed, label, seed_index)
    mcfg = cfg.model_config(seed=cell_seed, **overrides)
    tcfg = cfg.train_config(seed=cell_seed)
    result = train_loop(mcfg, tcfg, train_ds)
    report = evaluate(result.params, mcfg, test_ds)
    return {
        "variant": label,
        "seed": seed_index,
        "acc": 100.0 * report.accuracy,
        "mean_acc": 100.0 * report.mean_class_accuracy,
        "params": count_params(mcfg)["total"],
        "flops": estimate_flops(mcfg)["total"],
    }


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    train_ds = _load_features(args.data)
    if args.test_data:
        test_ds = _load_features(args.test_data)
    else:
        train_ds, test_ds = split_dataset(train_ds, 0.8, seed=cfg.seed)
    out_dir = Path(args.out)
    write_effective_config(cfg, out_dir)
    cells = grid_cells(args.grid, cfg)
    jobs = [(label, overrides, s) for label, overrides in cells for s in range(args.seeds)]
    rows: dict = {}
    errors = []

    def run(job):
        label, overrides, s = job
        try:
            return job, _run_cell(cfg, label, overrides, s, train_ds, test_ds), None
        except Exception as e:  # cell failures are recorded, the grid continues
            return job, None, f"{type(e).__name__}: {e}"

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            outcomes = list(pool.map(run, jobs))
    else:
        outcomes = [run(job) for job in jobs]
    for job, row, err in outcomes:
        if err is None:
            rows[(job[0], job[2])] = row
        else:
            errors.append({"variant": job[0], "seed": job[2], "error": err})

    with open(out_dir / "results.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["variant", "seed", "acc", "mean_acc", "params", "flops"])
        writer.writeheader()
        for label, _ in cells:
            for s in range(args.seeds):
                if (label, s) in rows:
                    writer.writerow(rows[(label, s)])
    with open(out_dir / "summary.csv", "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["variant", "acc_mean", "acc_std", "mean_acc_mean", "mean_acc_std", "params", "flops"]
        )
        writer.writeheader()
        for label, _ in cells:
            got = [rows[(label, s)] for s in range(args.seeds) if (label, s) in rows]
            if not got:
                continue
            accs = np.array([r["acc"] for r in got])
            maccs = np.array([r["mean_acc"] for r in got])
            writer.writerow(
                {
                    "variant": label,
                    "acc_mean": accs.mean(),
                    "acc_std": accs.std(),
                    "mean_acc_mean": maccs.mean(),
                    "mean_acc_std": maccs.std(),
                    "params": got[0]["params"],
                    "flops": got[0]["flops"],
                }
            )
            print(
                f"{label:24s} acc {accs.mean():6.2f} +- {accs.std():5.2f}   "
                f"mean acc {maccs.mean():6.2f} +- {maccs.std():5.2f}"
            )
    if errors:
        with open(out_dir / "errors.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["variant", "seed", "error"])
            writer.writeheader()
            writer.writerows(errors)
        print(f"{len(errors)} cell(s) failed; see errors.csv", file=sys.stderr)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args)
    mcfg = cfg.model_config()
    params = build_params(mcfg)
    rng = np.random.default_rng([cfg.seed, 71])
    x_img = Tensor(rng.standard_normal((2, mcfg.patches, mcfg.base_dim)))
    x_lm = Tensor(rng.standard_normal((2, mcfg.patches, mcfg.base_dim)))
    labels = rng.integers(0, mcfg.num_classes, size=2)

    def f():
        logits = forward(x_img, x_lm, params, mcfg, training=False)
        return label_smoothing_ce(logits, labels, mcfg.label_smoothing)

    report = finite_diff_check(
        f,
        params.named,
        h=args.h,
        tol=args.tol,
        samples_per_param=args.samples,
        rng=np.random.default_rng([cfg.seed, 73]),
    )
    print(f"checked {sum(p.checked for p in report.params)} entries over {len(report.params)} tensors")
    print(f"worst relative error {report.max_rel_err:.3e} (tol {report.tol:.1e}): "
          f"{'PASS' if report.passed else 'FAIL'}")
    return 0 if report.passed else 1


def cmd_params(args) -> int:
    cfg = resolve_config(args)
    mcfg = cfg.model_config()
    counts = count_params(mcfg)
    flops = estimate_flops(mcfg)
    print(f"variant {mcfg.variant}, levels {list(mcfg.level_dims())}, depth {mcfg.depth}")
    for lvl in counts["per_level"]:
        print(f"  level dim {lvl['dim']:4d}: projections {lvl['projections']:>12,d}  blocks {lvl['blocks']:>12,d}")
    print(f"  head: {counts['head']:,d}")
    print(f"params: projections {counts['projections']:,d}  blocks {counts['blocks']:,d}  total {counts['total']:,d}")
    print(
        "flops (MACs/sample): "
        f"projections {flops['projections']:,d}  attention {flops['attention_linear'] + flops['attention_scores']:,d}  "
        f"mlp {flops['mlp']:,d}  head {flops['head']:,d}  total {flops['total']:,d}"
    )
    print(flops["formula"])
    return 0


def cmd_visualize(args) -> int:
    params, mcfg = _load_model_from_checkpoint(args.checkpoint)
    if mcfg.variant not in TWO_STREAM_VARIANTS:
        raise CliError(f"visualize needs a two-stream variant checkpoint, got {mcfg.variant!r}")
    ds = _load_features(args.data)
    if not 0 <= args.sample < len(ds):
        raise CliError(f"sample index {args.sample} out of range [0, {len(ds)})")
    x_img, x_lm, _ = ds.sample(args.sample)
    target = args.target_class
    captured = capture_attention(params, mcfg, x_img, x_lm, target)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    layout = near_square_layout(mcfg.patches)
    for stream in ("img", "lm"):
        rel = stream_relevance(captured, stream)
        write_pgm(out_dir / f"relevance_{stream}.pgm", render_map(rel.per_patch, layout))
        write_scores_csv(out_dir / f"relevance_{stream}.csv", rel.per_patch)
    print(f"wrote relevance_img.pgm and relevance_lm.pgm to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ferfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic PFER feature file")
    p.add_argument("--task", choices=["clusters", "xor"], required=True)
    p.add_argument("--p", type=int, default=8, help="patches per stream")
    p.add_argument("--d", type=int, default=32, help="feature dim per patch")
    p.add_argument("--classes", type=int, default=None, help="class count (clusters only)")
    p.add_argument("--count", type=int, required=True, help="samples per class")
    p.add_argument("--sigma", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a variant on a PFER file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a PFER file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--test-data", dest="test_data", default=None, help="held-out PFER file; default 80/20 split")
    p.add_argument("--grid", choices=["table4", "pyramid", "swapdepth", "depth"], required=True)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the configured model")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--samples", type=int, default=3, help="entries checked per parameter tensor")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="print parameter and FLOP accounting")
    _add_config_flags(p)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("visualize", help="render per-stream relevance maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--class", dest="target_class", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, FileFormatError, ShapeError, ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
