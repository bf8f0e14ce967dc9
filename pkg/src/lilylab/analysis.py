"""Measurement protocols over training traces.

Covers the numerical rank of accumulated effective weight updates (both
the sum of per-epoch terms and the final snapshot, since "accumulated"
admits both readings), router selectivity heatmaps, granularity sweeps,
and mean-absolute feature distances between layers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import adapters as ad
from . import encoder as enc
from . import training as tr
from .linalg import DEFAULT_RANK_TOL, numerical_rank, svd_spectrum, derive_seed

__all__ = [
    "BudgetError",
    "accumulated_delta_w", "lily_epoch_terms",
    "RankRow", "RankReport", "rank_experiment", "save_rank_csv",
    "HeatmapReport", "router_heatmap", "first_middle_last", "save_heatmap_csv",
    "SweepRow", "granularity_sweep", "save_sweep_csv",
    "FeatureDistanceReport", "feature_distance", "save_feature_distance_csv",
]


class BudgetError(ValueError):
    """Routed configuration needs more trainable parameters than the baseline."""


def _family_dims(trace: tr.TrainTrace) -> tuple[str, int, int]:
    family = trace.route_family
    if family is None:
        raise ValueError("trace has no adapted family to analyse")
    c_in, c_out = trace.encoder_cfg.family_dims(family)
    return family, c_in, c_out


def lily_epoch_terms(trace: tr.TrainTrace, layer: int,
                     per_batch: bool = False) -> list[np.ndarray]:
    """Effective weight update per epoch: s A_e (sum_i S-bar_i B_e,i).

    Epoch-mean route weights define each term; per_batch instead averages
    the per-batch terms of the epoch (same tensors, finer weights).
    """
    if trace.snapshots is None:
        raise ValueError("trace carries no adapter snapshots")
    if trace.kind != "lily":
        raise ValueError(f"expected a routed-adapter trace, got {trace.kind!r}")
    family, _, _ = _family_dims(trace)
    cfg: ad.LilyConfig = trace.adapter_cfg
    n_layers = trace.encoder_cfg.n_layers
    ne_1 = cfg.effective_ne_1(n_layers)
    group = ad.layer_group(layer, n_layers, ne_1)
    terms = []
    for e, snap in enumerate(trace.snapshots):
        a = snap[f"{family}.A{group}"]
        experts = [snap[f"{family}.B{i}"] for i in range(cfg.ne_2)]
        if per_batch:
            rows = [w for (ep, _b, l, w) in trace.route_log
                    if ep == e and l == layer]
            if not rows:
                raise ValueError(f"no route log for epoch {e}, layer {layer}")
            acc = None
            for w in rows:
                t = ad.effective_delta_w_from(a, experts, w, cfg.scale_s)
                acc = t if acc is None else acc + t
            terms.append(acc / len(rows))
        else:
            weights = trace.epoch_mean_routes(e, layer)
            terms.append(ad.effective_delta_w_from(a, experts, weights, cfg.scale_s))
    return terms


def accumulated_delta_w(trace: tr.TrainTrace, layer: int,
                        per_batch: bool = False) -> np.ndarray:
    """Sum of per-epoch effective weight updates for the reported family.

    For the LoRA baseline the per-epoch increments telescope, so this is
    the final product scale * A * B (zero init).
    """
    if trace.snapshots is None:
        raise ValueError("trace carries no adapter snapshots")
    family, c_in, c_out = _family_dims(trace)
    if not trace.snapshots:
        return np.zeros((c_in, c_out))
    if trace.kind == "lora":
        snap = trace.snapshots[-1]
        cfg: ad.LoraConfig = trace.adapter_cfg
        a = snap[f"{family}.lora{layer}.A"]
        b = snap[f"{family}.lora{layer}.B"]
        return (a @ b) * cfg.scale_s
    terms = lily_epoch_terms(trace, layer, per_batch=per_batch)
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc


# -- rank experiment -----------------------------------------------------------

@dataclass
class RankRow:
    layer: int
    lora_final_rank: int
    lily_accumulated_rank: int
    lily_final_snapshot_rank: int
    lora_sigma1: float
    lily_sigma1: float


@dataclass
class RankReport:
    rows: list
    tolerance: float
    lily_params: int
    lora_params: int
    lily_final_val_accuracy: float = 0.0
    lora_final_val_accuracy: float = 0.0
    lily_trace: tr.TrainTrace | None = None
    lora_trace: tr.TrainTrace | None = None


def total_param_count(cfg, encoder_cfg: enc.EncoderConfig) -> int:
    """Adapter parameters over all placed families (head excluded)."""
    total = 0
    for family in sorted(cfg.placement, key=ad.TARGETS.index):
        c_in, c_out = encoder_cfg.family_dims(family)
        if isinstance(cfg, ad.LilyConfig):
            total += ad.lily_param_count(cfg, c_in, c_out, encoder_cfg.n_layers)
        else:
            total += ad.lora_param_count(cfg.rank_r, encoder_cfg.n_layers,
                                         c_in, c_out)
    return total


def check_budget(lily_cfg: ad.LilyConfig, lora_cfg: ad.LoraConfig,
                 encoder_cfg: enc.EncoderConfig) -> tuple[int, int]:
    lily_total = total_param_count(lily_cfg, encoder_cfg)
    lora_total = total_param_count(lora_cfg, encoder_cfg)
    if lily_total > lora_total:
        raise BudgetError(
            f"routed adapters need {lily_total} parameters but the baseline "
            f"allows only {lora_total}")
    return lily_total, lora_total


def rank_experiment(task: tr.SyntheticTask, lora_cfg: ad.LoraConfig,
                    lily_cfg: ad.LilyConfig, opt: tr.OptimizerConfig,
                    seed: int, tol: float = DEFAULT_RANK_TOL,
                    layers: tuple = (0, 1, 2)) -> RankReport:
    """Train both flavors under a verified budget and compare update ranks.

    Reports, per requested layer, the rank of the LoRA final product and
    of the routed family's accumulated and final-snapshot updates.
    """
    ecfg = task.encoder_cfg
    lily_params, lora_params = check_budget(lily_cfg, lora_cfg, ecfg)
    for layer in layers:
        if not 0 <= layer < ecfg.n_layers:
            raise ValueError(f"layer {layer} out of range")

    student_seed = derive_seed(seed, "student")
    adapter_seed = derive_seed(seed, "adapters")
    train_seed = derive_seed(seed, "train")

    model_lily = enc.build_encoder(ecfg, student_seed)
    bundle_lily = enc.inject(model_lily, lily_cfg.placement, lily_cfg, adapter_seed)
    trace_lily = tr.train(model_lily, bundle_lily, task, opt, train_seed)

    model_lora = enc.build_encoder(ecfg, student_seed)
    bundle_lora = enc.inject(model_lora, lora_cfg.placement, lora_cfg, adapter_seed)
    trace_lora = tr.train(model_lora, bundle_lora, task, opt, train_seed)

    rows = []
    for layer in layers:
        lora_dw = accumulated_delta_w(trace_lora, layer)
        lily_acc = accumulated_delta_w(trace_lily, layer)
        lily_fin = lily_epoch_terms(trace_lily, layer)[-1]
        rows.append(RankRow(
            layer=layer,
            lora_final_rank=numerical_rank(lora_dw, tol),
            lily_accumulated_rank=numerical_rank(lily_acc, tol),
            lily_final_snapshot_rank=numerical_rank(lily_fin, tol),
            lora_sigma1=float(svd_spectrum(lora_dw).singular_values[0]),
            lily_sigma1=float(svd_spectrum(lily_acc).singular_values[0]),
        ))
    return RankReport(rows, tol, lily_params, lora_params,
                      trace_lily.final_val_accuracy,
                      trace_lora.final_val_accuracy,
                      lily_trace=trace_lily, lora_trace=trace_lora)


def save_rank_csv(path, report: RankReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "method", "mode", "rank", "sigma1", "tolerance",
                    "params"])
        for r in report.rows:
            w.writerow([r.layer, "lora", "final", r.lora_final_rank,
                        f"{r.lora_sigma1:.17g}", report.tolerance,
                        report.lora_params])
            w.writerow([r.layer, "lily", "accumulated", r.lily_accumulated_rank,
                        f"{r.lily_sigma1:.17g}", report.tolerance,
                        report.lily_params])
            w.writerow([r.layer, "lily", "final", r.lily_final_snapshot_rank,
                        f"{r.lily_sigma1:.17g}", report.tolerance,
                        report.lily_params])


# -- router selectivity ----------------------------------------------------------

@dataclass
class HeatmapReport:
    """Accumulated route weight per (layer, expert) over all logged batches."""

    rows: list                      # (layer, expert, weight) sorted
    events_per_layer: dict = field(default_factory=dict)

    def weight(self, layer: int, expert: int) -> float:
        for l, e, w in self.rows:
            if l == layer and e == expert:
                return w
        raise KeyError((layer, expert))

    def layer_weights(self, layer: int) -> np.ndarray:
        return np.array([w for l, _e, w in self.rows if l == layer])

    def share(self, layer: int, expert: int) -> float:
        weights = self.layer_weights(layer)
        return self.weight(layer, expert) / float(np.sum(weights))

    def argmax_expert(self, layer: int) -> int:
        return int(np.argmax(self.layer_weights(layer)))

    def layers(self) -> list:
        return sorted({l for l, _e, _w in self.rows})


def first_middle_last(layers) -> tuple:
    """The usual shallow/middle/deep picks for selectivity displays."""
    layers = sorted(layers)
    return tuple(dict.fromkeys(
        (layers[0], layers[len(layers) // 2], layers[-1])))


def router_heatmap(trace: tr.TrainTrace, layers=None) -> HeatmapReport:
    """Sum the logged route weights over all batches and epochs.

    ``layers`` restricts the report (e.g. to first_middle_last(...));
    all logged layers are kept by default.
    """
    keep = None if layers is None else set(layers)
    sums: dict[tuple[int, int], float] = {}
    events: dict[int, int] = {}
    for (_e, _b, layer, weights) in trace.route_log:
        if keep is not None and layer not in keep:
            continue
        events[layer] = events.get(layer, 0) + 1
        for expert, w in enumerate(weights):
            key = (layer, expert)
            sums[key] = sums.get(key, 0.0) + float(w)
    rows = [(l, e, sums[(l, e)]) for (l, e) in sorted(sums)]
    return HeatmapReport(rows, events)


def save_heatmap_csv(path, report: HeatmapReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "expert", "weight"])
        for layer, expert, weight in report.rows:
            w.writerow([layer, expert, f"{weight:.17g}"])


# -- granularity sweep -------------------------------------------------------------

@dataclass
class SweepRow:
    ne: int
    rank: int
    params: int
    val_accuracy: float


def granularity_sweep(task: tr.SyntheticTask, ne_values, mode: str,
                      base_rank: int, opt: tr.OptimizerConfig, seed: int,
                      placement: frozenset = ad.PLACEMENT_VARIANTS["kvmlp"],
                      scale_s: float = 1.0) -> list[SweepRow]:
    """Train one routed configuration per granularity value.

    mode "fixed" keeps the rank constant so parameters grow with ne;
    mode "budgeted" keeps ne * rank constant so the projector/expert
    parameter count stays put (router parameters add slack).
    """
    if mode not in ("fixed", "budgeted"):
        raise ValueError(f"mode must be 'fixed' or 'budgeted', got {mode!r}")
    ecfg = task.encoder_cfg
    ne_values = list(ne_values)
    for ne in ne_values:
        if not 1 <= ne <= ecfg.n_layers:
            raise ValueError(f"ne={ne} must lie in [1, {ecfg.n_layers}]")
    budget = base_rank * ne_values[0]
    rows = []
    for ne in ne_values:
        rank = base_rank if mode == "fixed" else max(1, budget // ne)
        cfg = ad.LilyConfig(rank_r=rank, ne_1=ne, ne_2=ne, scale_s=scale_s,
                            placement=placement)
        model = enc.build_encoder(ecfg, derive_seed(seed, "student"))
        bundle = enc.inject(model, placement, cfg, derive_seed(seed, "adapters", ne))
        trace = tr.train(model, bundle, task, opt, derive_seed(seed, "train", ne))
        rows.append(SweepRow(ne=ne, rank=rank,
                             params=total_param_count(cfg, ecfg),
                             val_accuracy=trace.final_val_accuracy))
    return rows


def save_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ne", "rank", "params", "val_acc"])
        for r in rows:
            w.writerow([r.ne, r.rank, r.params, f"{r.val_accuracy:.17g}"])


# -- feature distances ---------------------------------------------------------------

@dataclass
class FeatureDistanceReport:
    rows: list  # (layer_a, layer_b, mean_abs_diff)


def feature_distance(features, pairs) -> FeatureDistanceReport:
    """Mean absolute elementwise difference between layer activations."""
    n = len(features)
    rows = []
    for la, lb in pairs:
        if not (0 <= la < n and 0 <= lb < n):
            raise IndexError(f"layer pair ({la}, {lb}) out of range [0, {n})")
        dist = float(np.mean(np.abs(features[la] - features[lb])))
        rows.append((la, lb, dist))
    return FeatureDistanceReport(rows)


def save_feature_distance_csv(path, report: FeatureDistanceReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer_a", "layer_b", "mean_abs_diff"])
        for la, lb, dist in report.rows:
            w.writerow([la, lb, f"{dist:.17g}"])
