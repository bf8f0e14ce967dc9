"""Command-line entry point: every experiment as a subcommand over a config.

Configs are flat ``key=value`` text files ('#' starts a comment). Each
subcommand owns a schema; unknown keys are rejected and every value is
type-checked before any work starts. Exit codes: 0 success, 1 check
failure, 2 config error, 3 divergence during training.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import adapters as ad
from . import analysis as an
from . import encoder as enc
from . import flops as fl
from . import matio
from . import training as tr
from .linalg import derive_seed, seeded_gaussian, softmax_stable, DEFAULT_RANK_TOL
from .tape import (backward, finite_diff_grad, grad_check, record_forward,
                   save_gradcheck_csv)

__all__ = ["main", "ConfigError", "parse_config", "apply_schema"]

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


class ConfigError(ValueError):
    def __init__(self, message: str, key: str = ""):
        super().__init__(message)
        self.key = key


REQUIRED = object()


@dataclass(frozen=True)
class Key:
    name: str
    kind: str            # int | float | bool | str
    default: object = REQUIRED
    choices: tuple = ()


def _parse_value(key: Key, raw: str):
    try:
        if key.kind == "int":
            return int(raw)
        if key.kind == "float":
            return float(raw)
        if key.kind == "bool":
            low = raw.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(
            f"config key {key.name!r}: cannot parse {raw!r} as {key.kind}",
            key.name) from None


def parse_config(path) -> dict[str, str]:
    """Read flat key=value lines; '#' comments and blank lines are skipped."""
    raw: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        raw[k.strip()] = v.strip()
    return raw


def apply_schema(raw: dict[str, str], schema: list[Key]) -> dict:
    by_name = {k.name: k for k in schema}
    unknown = sorted(set(raw) - set(by_name))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}", unknown[0])
    out = {}
    for key in schema:
        if key.name in raw:
            value = _parse_value(key, raw[key.name])
        elif key.default is REQUIRED:
            raise ConfigError(f"missing required key {key.name!r}", key.name)
        else:
            value = key.default
        if key.choices and value not in key.choices:
            raise ConfigError(
                f"config key {key.name!r}: {value!r} not in {key.choices}",
                key.name)
        out[key.name] = value
    return out


# -- shared schema fragments ---------------------------------------------------

def _encoder_keys(n_layers=6, d_model=64, n_heads=4, d_ff=128, vocab=64,
                  seq_len=16, n_classes=4) -> list[Key]:
    return [
        Key("n_layers", "int", n_layers),
        Key("d_model", "int", d_model),
        Key("n_heads", "int", n_heads),
        Key("d_ff", "int", d_ff),
        Key("vocab", "int", vocab),
        Key("seq_len", "int", seq_len),
        Key("n_classes", "int", n_classes),
    ]


def _optimizer_keys(epochs=30) -> list[Key]:
    return [
        Key("lr", "float", 5e-3),
        Key("beta1", "float", 0.9),
        Key("beta2", "float", 0.999),
        Key("weight_decay", "float", 1e-4),
        Key("eps", "float", 1e-8),
        Key("epochs", "int", epochs),
        Key("batch_size", "int", 32),
        Key("lr_schedule", "str", "cosine", tr.LR_SCHEDULES),
    ]


def _task_keys() -> list[Key]:
    return [Key("n_train", "int", 512), Key("n_val", "int", 128)]


def _base_keys() -> list[Key]:
    return [Key("seed", "int", 0), Key("out_dir", "str", "out")]


def _encoder_from(cfg: dict) -> enc.EncoderConfig:
    try:
        return enc.EncoderConfig(
            n_layers=cfg["n_layers"], d_model=cfg["d_model"],
            n_heads=cfg["n_heads"], d_ff=cfg["d_ff"], vocab=cfg["vocab"],
            seq_len=cfg["seq_len"], n_classes=cfg["n_classes"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _optimizer_from(cfg: dict) -> tr.OptimizerConfig:
    try:
        return tr.OptimizerConfig(
            lr=cfg["lr"], beta1=cfg["beta1"], beta2=cfg["beta2"],
            weight_decay=cfg["weight_decay"], eps=cfg["eps"],
            epochs=cfg["epochs"], batch_size=cfg["batch_size"],
            lr_schedule=cfg["lr_schedule"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _placement_from(cfg: dict, key: str = "placement") -> frozenset:
    try:
        return ad.parse_placement(cfg[key])
    except ValueError as exc:
        raise ConfigError(str(exc), key) from None


def _int_list(cfg: dict, key: str) -> list[int]:
    try:
        return [int(tok) for tok in cfg[key].replace("+", ",").split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"config key {key!r}: expected comma-separated "
                          f"integers, got {cfg[key]!r}", key) from None


# -- train -----------------------------------------------------------------------

# rank_r defaults to None ("unset"): _adapter_cfg_from rejects adapter
# methods without it, while method=frozen never needs it
TRAIN_SCHEMA = (
    [Key("method", "str", REQUIRED, ("lily", "lora", "frozen")),
     Key("rank_r", "int", None),
     Key("ne_1", "int", 2),
     Key("ne_2", "int", None),
     Key("scale_s", "float", 1.0),
     Key("share_a", "bool", True),
     Key("router_mode", "str", "routed", ("routed", "uniform")),
     Key("shared_router", "bool", False),
     Key("placement", "str", "kvmlp")]
    + _encoder_keys() + _optimizer_keys() + _task_keys() + _base_keys()
)


def _adapter_cfg_from(cfg: dict):
    method = cfg["method"]
    if method == "frozen":
        return None
    if cfg["rank_r"] is None:
        raise ConfigError("missing required key 'rank_r'", "rank_r")
    placement = _placement_from(cfg)
    try:
        if method == "lily":
            ne_1 = cfg["ne_1"]
            ne_2 = cfg["ne_2"] if cfg["ne_2"] is not None else ne_1
            return ad.LilyConfig(
                rank_r=cfg["rank_r"], ne_1=ne_1, ne_2=ne_2,
                scale_s=cfg["scale_s"], share_a=cfg["share_a"],
                router_mode=cfg["router_mode"],
                shared_router=cfg["shared_router"], placement=placement)
        return ad.LoraConfig(rank_r=cfg["rank_r"], scale_s=cfg["scale_s"],
                             placement=placement)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _run_training(cfg: dict):
    ecfg = _encoder_from(cfg)
    opt = _optimizer_from(cfg)
    seed = cfg["seed"]
    task = tr.make_task(derive_seed(seed, "task"), ecfg,
                        n_train=cfg["n_train"], n_val=cfg["n_val"])
    model = enc.build_encoder(ecfg, derive_seed(seed, "student"))
    acfg = _adapter_cfg_from(cfg)
    if acfg is None:
        bundle = enc.frozen_bundle()
    else:
        bundle = enc.inject(model, acfg.placement, acfg, derive_seed(seed, "adapters"))
    trace = tr.train(model, bundle, task, opt, derive_seed(seed, "train"))
    return model, bundle, trace


def cmd_train(cfg: dict, out: Path) -> int:
    model, bundle, trace = _run_training(cfg)
    produced = tr.save_trace_csvs(trace, out)
    tensors = dict(enc.trainable_arrays(model, bundle))
    matio.save_checkpoint(out / "adapters.bin", out / "adapters.manifest", tensors)
    produced += ["adapters.bin", "adapters.manifest"]
    (out / "manifest.txt").write_text("".join(f"{n}\n" for n in produced))
    print(f"final val accuracy {trace.final_val_accuracy:.4f} "
          f"({len(trace.losses)} steps, {trace.param_count} trainable params)")
    return EXIT_OK


# -- gradcheck ---------------------------------------------------------------------

GRADCHECK_SCHEMA = (
    [Key("method", "str", "both", ("lily", "lora", "both")),
     Key("rank_r", "int", 2),
     Key("ne_1", "int", 2),
     Key("ne_2", "int", None),
     Key("scale_s", "float", 1.0),
     Key("router_mode", "str", "routed", ("routed", "uniform")),
     Key("shared_router", "bool", False),
     Key("placement", "str", "kvmlp"),
     Key("batch", "int", 2),
     Key("rel_tol", "float", 1e-4),
     Key("abs_tol", "float", 1e-6),
     Key("fd_eps", "float", 1e-5),
     Key("corrupt", "bool", False)]
    + _encoder_keys(n_layers=2, d_model=8, n_heads=2, d_ff=16, vocab=16,
                    seq_len=4, n_classes=3)
    + _base_keys()
)


def run_gradcheck(ecfg: enc.EncoderConfig, acfg, seed: int, batch: int = 2,
                  rel_tol: float = 1e-4, abs_tol: float = 1e-6,
                  fd_eps: float = 1e-5, corrupt: bool = False,
                  prefix: str = ""):
    """Analytic vs central-difference gradients for every trainable tensor."""
    model = enc.build_encoder(ecfg, derive_seed(seed, "student"))
    if acfg is None:
        bundle = enc.frozen_bundle()
    else:
        bundle = enc.inject(model, acfg.placement, acfg, derive_seed(seed, "adapters"))
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "gradcheck")))
    tokens = rng.integers(0, ecfg.vocab, size=(batch, ecfg.seq_len), dtype=np.int64)
    labels = rng.integers(0, ecfg.n_classes, size=batch, dtype=np.int64)

    def program(tape, params):
        return enc.batch_loss_tape(tape, model, bundle, tokens, labels, params)

    live = enc.trainable_arrays(model, bundle)
    # give zero-init experts nonzero values, otherwise their gradient
    # paths multiply by zero and the check proves nothing
    params = {}
    for i, (name, arr) in enumerate(sorted(live.items())):
        params[name] = arr + seeded_gaussian(
            arr.shape[0], arr.shape[1], 0.05, derive_seed(seed, "jitter", i))

    tape, loss = record_forward(program, params)
    analytic = backward(tape, loss)
    if corrupt:
        worst = sorted(analytic)[0]
        analytic[worst] = analytic[worst] * 1.5 + 1.0
    numeric = finite_diff_grad(program, params, eps=fd_eps)
    if prefix:
        analytic = {f"{prefix}{k}": v for k, v in analytic.items()}
        numeric = {f"{prefix}{k}": v for k, v in numeric.items()}
    return grad_check(analytic, numeric, rel_tol=rel_tol, abs_tol=abs_tol)


def cmd_gradcheck(cfg: dict, out: Path) -> int:
    ecfg = _encoder_from(cfg)
    seed = cfg["seed"]
    ne_2 = cfg["ne_2"] if cfg["ne_2"] is not None else cfg["ne_1"]
    placement = _placement_from(cfg)
    jobs = []
    if cfg["method"] in ("lily", "both"):
        jobs.append(("lily.", ad.LilyConfig(
            rank_r=cfg["rank_r"], ne_1=cfg["ne_1"], ne_2=ne_2,
            scale_s=cfg["scale_s"], router_mode=cfg["router_mode"],
            shared_router=cfg["shared_router"], placement=placement)))
    if cfg["method"] in ("lora", "both"):
        jobs.append(("lora.", ad.LoraConfig(
            rank_r=cfg["rank_r"], scale_s=cfg["scale_s"], placement=placement)))
    rows = []
    passed = True
    worst_name, worst_rel = "", 0.0
    for prefix, acfg in jobs:
        report = run_gradcheck(ecfg, acfg, seed, batch=cfg["batch"],
                               rel_tol=cfg["rel_tol"], abs_tol=cfg["abs_tol"],
                               fd_eps=cfg["fd_eps"], corrupt=cfg["corrupt"],
                               prefix=prefix)
        rows.extend(report.rows)
        passed = passed and report.passed
        name, rel = report.worst()
        if rel >= worst_rel:
            worst_name, worst_rel = name, rel
    merged = type(report)(rows, cfg["rel_tol"], cfg["abs_tol"])
    save_gradcheck_csv(out / "gradcheck.csv", merged)
    if not passed:
        print(f"gradient check FAILED: worst parameter {worst_name} "
              f"(max rel err {worst_rel:.3e})", file=sys.stderr)
        return EXIT_CHECK_FAILED
    print(f"gradient check passed for {len(rows)} parameters "
          f"(worst {worst_name}, max rel err {worst_rel:.3e})")
    return EXIT_OK


# -- rank ---------------------------------------------------------------------------

RANK_SCHEMA = (
    [Key("lily_rank_r", "int", 16),
     Key("lily_ne", "int", 2),
     Key("lily_scale_s", "float", 1.0),
     Key("lily_router_mode", "str", "routed", ("routed", "uniform")),
     Key("lora_rank_r", "int", 4),
     Key("lora_scale_s", "float", 1.0),
     Key("placement", "str", "kvmlp"),
     Key("layers", "str", "0,1,2"),
     Key("tol", "float", DEFAULT_RANK_TOL)]
    # budget matching needs the per-layer baseline budget to dominate the
    # shared adapters, which the 6-layer default is too shallow for
    + _encoder_keys(n_layers=12) + _optimizer_keys(epochs=8) + _task_keys()
    + _base_keys()
)


def cmd_rank(cfg: dict, out: Path) -> int:
    ecfg = _encoder_from(cfg)
    opt = _optimizer_from(cfg)
    placement = _placement_from(cfg)
    seed = cfg["seed"]
    try:
        lily_cfg = ad.LilyConfig(rank_r=cfg["lily_rank_r"], ne_1=cfg["lily_ne"],
                                 ne_2=cfg["lily_ne"], scale_s=cfg["lily_scale_s"],
                                 router_mode=cfg["lily_router_mode"],
                                 placement=placement)
        lora_cfg = ad.LoraConfig(rank_r=cfg["lora_rank_r"],
                                 scale_s=cfg["lora_scale_s"], placement=placement)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    layers = tuple(_int_list(cfg, "layers"))
    task = tr.make_task(derive_seed(seed, "task"), ecfg,
                        n_train=cfg["n_train"], n_val=cfg["n_val"])
    report = an.rank_experiment(task, lora_cfg, lily_cfg, opt, seed,
                                tol=cfg["tol"], layers=layers)
    an.save_rank_csv(out / "rank.csv", report)
    for row in report.rows:
        print(f"layer {row.layer}: lora final rank {row.lora_final_rank}, "
              f"lily accumulated rank {row.lily_accumulated_rank}, "
              f"lily final rank {row.lily_final_snapshot_rank}")
    print(f"budget: lily {report.lily_params} <= lora {report.lora_params}")
    return EXIT_OK


# -- heatmap -------------------------------------------------------------------------

HEATMAP_SCHEMA = (
    [Key("rank_r", "int", 8),
     Key("ne_1", "int", 2),
     Key("ne_2", "int", None),
     Key("scale_s", "float", 1.0),
     Key("share_a", "bool", True),
     Key("router_mode", "str", "routed", ("routed", "uniform")),
     Key("shared_router", "bool", False),
     Key("placement", "str", "kvmlp")]
    + _encoder_keys() + _optimizer_keys(epochs=12) + _task_keys() + _base_keys()
)


def cmd_heatmap(cfg: dict, out: Path) -> int:
    work = dict(cfg)
    work["method"] = "lily"
    _model, _bundle, trace = _run_training(work)
    report = an.router_heatmap(trace)
    an.save_heatmap_csv(out / "heatmap.csv", report)
    tr.save_trace_csvs(trace, out)
    for layer in report.layers():
        weights = report.layer_weights(layer)
        print(f"layer {layer}: expert weights "
              + " ".join(f"{w:.3f}" for w in weights / weights.sum()))
    return EXIT_OK


# -- flops ----------------------------------------------------------------------------

FLOPS_SCHEMA = (
    [Key("N", "int", 1024),
     Key("d", "int", 16),
     Key("C", "int", 768),
     Key("Ne", "int", 4),
     Key("reps", "int", 10),
     Key("timed", "bool", True)]
    + _base_keys()
)


def cmd_flops(cfg: dict, out: Path) -> int:
    shape = (cfg["N"], cfg["d"], cfg["C"], cfg["Ne"])
    if cfg["timed"]:
        report = fl.timed_compare(*shape, reps=cfg["reps"], seed=cfg["seed"])
    else:
        report = fl.flops_report(*shape)
    fl.save_flops_csv(out / "flops.csv", report)
    print(f"naive {report.naive_flops} flops, efficient {report.efficient_flops} "
          f"flops, ratio {report.flops_ratio:.3f}")
    if cfg["timed"]:
        print(f"naive {report.naive_ms:.3f} ms, efficient "
              f"{report.efficient_ms:.3f} ms, speedup {report.time_ratio:.2f}x")
    return EXIT_OK


# -- equiv ----------------------------------------------------------------------------

EQUIV_SCHEMA = (
    [Key("cases", "int", 100),
     Key("tol", "float", fl.MERGE_TOL),
     Key("max_n", "int", 64),
     Key("max_c", "int", 64),
     Key("max_r", "int", 16),
     Key("max_ne", "int", 8)]
    + _base_keys()
)


def cmd_equiv(cfg: dict, out: Path) -> int:
    rng = np.random.Generator(np.random.PCG64(derive_seed(cfg["seed"], "equiv")))
    rows = []
    worst = 0.0
    for case in range(cfg["cases"]):
        n = int(rng.integers(1, cfg["max_n"] + 1))
        c = int(rng.integers(1, cfg["max_c"] + 1))
        r = int(rng.integers(1, cfg["max_r"] + 1))
        ne = int(rng.integers(1, cfg["max_ne"] + 1))
        x = rng.standard_normal((n, r))
        experts = [rng.standard_normal((r, c)) for _ in range(ne)]
        weights = ad.RouteWeights(softmax_stable(rng.standard_normal(ne)))
        naive = ad.combine_experts_naive(x, weights, experts)
        merged = x @ ad.combine_experts(weights, experts)
        diff = float(np.max(np.abs(naive - merged)))
        worst = max(worst, diff)
        rows.append((case, n, c, r, ne, diff))
    with open(out / "equiv.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case", "N", "C", "r", "Ne", "max_abs_diff"])
        for row in rows:
            w.writerow(list(row[:5]) + [f"{row[5]:.17g}"])
    print(f"{cfg['cases']} cases, worst |naive - efficient| = {worst:.3e}")
    if worst > cfg["tol"]:
        print(f"equivalence FAILED beyond {cfg['tol']}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


# -- sweep ----------------------------------------------------------------------------

SWEEP_SCHEMA = (
    [Key("ne_values", "str", "1,2,3,6"),
     Key("sweep_mode", "str", "fixed", ("fixed", "budgeted")),
     Key("rank_r", "int", 8),
     Key("scale_s", "float", 1.0),
     Key("placement", "str", "kvmlp")]
    + _encoder_keys() + _optimizer_keys(epochs=8) + _task_keys() + _base_keys()
)


def cmd_sweep(cfg: dict, out: Path) -> int:
    ecfg = _encoder_from(cfg)
    opt = _optimizer_from(cfg)
    seed = cfg["seed"]
    ne_values = _int_list(cfg, "ne_values")
    placement = _placement_from(cfg)
    task = tr.make_task(derive_seed(seed, "task"), ecfg,
                        n_train=cfg["n_train"], n_val=cfg["n_val"])
    try:
        rows = an.granularity_sweep(task, ne_values, cfg["sweep_mode"],
                                    cfg["rank_r"], opt, seed,
                                    placement=placement, scale_s=cfg["scale_s"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    an.save_sweep_csv(out / "sweep.csv", rows)
    for r in rows:
        print(f"ne {r.ne}: rank {r.rank}, params {r.params}, "
              f"val acc {r.val_accuracy:.4f}")
    return EXIT_OK


# -- plot -----------------------------------------------------------------------------

PLOT_SCHEMA = _base_keys()


def cmd_plot(cfg: dict, out: Path) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    made = []

    def _save(fig, name):
        fig.tight_layout()
        fig.savefig(out / name, dpi=120)
        plt.close(fig)
        made.append(name)

    loss_csv = out / "loss.csv"
    if loss_csv.exists():
        data = np.loadtxt(loss_csv, delimiter=",", ndmin=2)
        fig, ax = plt.subplots()
        ax.plot(data[:, 0], data[:, 1])
        ax.set_xlabel("step"); ax.set_ylabel("loss")
        _save(fig, "loss.png")

    acc_csv = out / "accuracy.csv"
    if acc_csv.exists():
        data = np.loadtxt(acc_csv, delimiter=",", ndmin=2)
        fig, ax = plt.subplots()
        ax.plot(data[:, 0], data[:, 1], marker="o")
        ax.set_xlabel("epoch"); ax.set_ylabel("val accuracy")
        _save(fig, "accuracy.png")

    heat_csv = out / "heatmap.csv"
    if heat_csv.exists():
        data = np.loadtxt(heat_csv, delimiter=",", skiprows=1, ndmin=2)
        layers = sorted(set(int(r) for r in data[:, 0]))
        experts = sorted(set(int(r) for r in data[:, 1]))
        grid = np.zeros((len(layers), len(experts)))
        for l, e, w in data:
            grid[layers.index(int(l)), experts.index(int(e))] = w
        grid /= grid.sum(axis=1, keepdims=True)
        fig, ax = plt.subplots()
        im = ax.imshow(grid, aspect="auto", cmap="viridis")
        ax.set_xlabel("expert"); ax.set_ylabel("layer")
        ax.set_yticks(range(len(layers)), layers)
        fig.colorbar(im, ax=ax, label="share of accumulated weight")
        _save(fig, "heatmap.png")

    sweep_csv = out / "sweep.csv"
    if sweep_csv.exists():
        data = np.loadtxt(sweep_csv, delimiter=",", skiprows=1, ndmin=2)
        fig, ax = plt.subplots()
        ax.plot(data[:, 0], data[:, 3], marker="o")
        ax.set_xlabel("ne"); ax.set_ylabel("val accuracy")
        _save(fig, "sweep.png")

    rank_csv = out / "rank.csv"
    if rank_csv.exists():
        with open(rank_csv, newline="") as fh:
            rows = list(csv.DictReader(fh))
        layers = sorted({int(r["layer"]) for r in rows})
        series = {}
        for r in rows:
            series.setdefault(f'{r["method"]}/{r["mode"]}', {})[int(r["layer"])] = int(r["rank"])
        fig, ax = plt.subplots()
        width = 0.8 / len(series)
        for i, (label, vals) in enumerate(sorted(series.items())):
            xs = [l + i * width for l in layers]
            ax.bar(xs, [vals.get(l, 0) for l in layers], width=width, label=label)
        ax.set_xlabel("layer"); ax.set_ylabel("numerical rank")
        ax.legend()
        _save(fig, "rank.png")

    print(f"wrote {', '.join(made) if made else 'nothing (no known CSVs found)'}")
    return EXIT_OK


# -- dispatch -----------------------------------------------------------------------

COMMANDS = {
    "train": (TRAIN_SCHEMA, cmd_train),
    "gradcheck": (GRADCHECK_SCHEMA, cmd_gradcheck),
    "rank": (RANK_SCHEMA, cmd_rank),
    "heatmap": (HEATMAP_SCHEMA, cmd_heatmap),
    "flops": (FLOPS_SCHEMA, cmd_flops),
    "equiv": (EQUIV_SCHEMA, cmd_equiv),
    "sweep": (SWEEP_SCHEMA, cmd_sweep),
    "plot": (PLOT_SCHEMA, cmd_plot),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lilylab",
        description="Adapter-lab experiments over key=value config files.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override seed")
        p.add_argument("--tol", type=float, default=None,
                       help="override rank/equivalence tolerance")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    schema, handler = COMMANDS[args.command]
    try:
        raw = parse_config(args.config) if args.config else {}
        cfg = apply_schema(raw, schema)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.tol is not None and "tol" in cfg:
            cfg["tol"] = args.tol
        out = Path(args.out if args.out is not None else cfg["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        return handler(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except an.BudgetError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except tr.DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except fl.EquivalenceError as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
