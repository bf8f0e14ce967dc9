"""Low-rank adapters: a per-layer LoRA baseline and routed shared adapters.

The routed family ("Lily") splits the classic per-layer A/B pair apart:
down-projectors A are shared across contiguous layer groups, a single
model-wide bank of up-projector experts B serves every layer, and a
router per A turns the layer's down-projected features into a softmax
weight over the experts. The weighted expert merge is applied as one
merged r x C_out matrix (scalar-weighted sum of experts followed by a
single matmul), which is algebraically identical to pushing the input
through every expert but much cheaper.

Both a direct numpy forward and a tape-recorded forward are provided;
they perform the same operations in the same order, so their outputs
agree bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import (ShapeError, as_matrix, derive_seed, matmul,
                     seeded_gaussian, softmax_stable)
from .tape import Node, Tape

__all__ = [
    "TARGETS", "PLACEMENT_VARIANTS", "parse_placement",
    "LilyConfig", "LoraConfig", "LilyAdapterSet", "LoraAdapter", "RouteWeights",
    "layer_group", "down_project", "route",
    "combine_experts", "combine_experts_naive",
    "lily_forward", "lora_forward", "effective_delta_w", "effective_delta_w_from",
    "lily_param_count", "lora_param_count",
    "init_adapters", "init_lora",
    "lily_tape_forward", "lora_tape_forward",
]

INIT_STD = 0.02

TARGETS = ("query", "key", "value", "mlp_up", "mlp_down")

PLACEMENT_VARIANTS = {
    "qv": frozenset({"query", "value"}),
    "mlp": frozenset({"mlp_up", "mlp_down"}),
    "qvmlp": frozenset({"query", "value", "mlp_up", "mlp_down"}),
    "kvmlp": frozenset({"key", "value", "mlp_up", "mlp_down"}),
}


def parse_placement(name: str) -> frozenset[str]:
    """Placement from a named variant ("kvmlp") or an explicit target list.

    Explicit lists are separated by ',' or '+'; the token "mlp" expands to
    both MLP projections. Empty placements are rejected.
    """
    text = name.strip().lower()
    if text in PLACEMENT_VARIANTS:
        return PLACEMENT_VARIANTS[text]
    targets: set[str] = set()
    for token in filter(None, text.replace("+", ",").split(",")):
        token = token.strip()
        if token == "mlp":
            targets.update(("mlp_up", "mlp_down"))
        elif token in TARGETS:
            targets.add(token)
        else:
            raise ValueError(f"unknown placement target {token!r}")
    if not targets:
        raise ValueError("placement must name at least one target")
    return frozenset(targets)


# -- configuration and state ------------------------------------------------

@dataclass(frozen=True)
class LilyConfig:
    """Hyperparameters of the routed shared-adapter family.

    rank_r is the hidden dimension of all projectors, ne_1 the number of
    down-projectors (each owning a contiguous block of layers), ne_2 the
    number of up-projector experts in the model-wide bank, and scale_s
    the factor on the adapter contribution. share_a=False forces one
    down-projector per layer regardless of ne_1; router_mode="uniform"
    removes the routers and fixes every expert weight to 1/ne_2;
    shared_router=True binds one router to the whole model instead of one
    per down-projector.
    """

    rank_r: int = 8
    ne_1: int = 2
    ne_2: int = 2
    scale_s: float = 1.0
    share_a: bool = True
    router_mode: str = "routed"
    placement: frozenset = PLACEMENT_VARIANTS["kvmlp"]
    shared_router: bool = False

    def __post_init__(self):
        if self.rank_r < 1 or self.ne_1 < 1 or self.ne_2 < 1:
            raise ValueError("rank_r, ne_1 and ne_2 must all be >= 1")
        if self.router_mode not in ("routed", "uniform"):
            raise ValueError(f"unknown router_mode {self.router_mode!r}")
        if not self.placement:
            raise ValueError("placement must be non-empty")

    def effective_ne_1(self, n_layers: int) -> int:
        ne_1 = self.ne_1 if self.share_a else n_layers
        if ne_1 > n_layers:
            raise ValueError(f"ne_1={ne_1} exceeds layer count {n_layers}")
        return ne_1

    @property
    def routed(self) -> bool:
        return self.router_mode == "routed"


@dataclass(frozen=True)
class LoraConfig:
    """Baseline configuration: one rank-r pair per placed projection per layer."""

    rank_r: int = 4
    scale_s: float = 1.0
    placement: frozenset = PLACEMENT_VARIANTS["kvmlp"]

    def __post_init__(self):
        if self.rank_r < 1:
            raise ValueError("rank_r must be >= 1")
        if not self.placement:
            raise ValueError("placement must be non-empty")


def layer_group(layer: int, n_layers: int, ne_1: int) -> int:
    """Contiguous block assignment: floor(layer * ne_1 / n_layers)."""
    if not 0 <= layer < n_layers:
        raise ValueError(f"layer {layer} out of range [0, {n_layers})")
    if not 1 <= ne_1 <= n_layers:
        raise ValueError(f"ne_1 must be in [1, {n_layers}], got {ne_1}")
    return (layer * ne_1) // n_layers


@dataclass
class LilyAdapterSet:
    """Adapter state for one target family (e.g. all value projections).

    downs: ne_1 down-projectors of shape c_in x r.
    experts: ne_2 model-wide up-projectors of shape r x c_out.
    routers: one ne_2 x r router per down-projector (a single shared one
        when configured so, none in uniform mode).
    layer_to_group: layer index -> down-projector index, contiguous and
        non-decreasing.
    """

    downs: list = field(default_factory=list)
    experts: list = field(default_factory=list)
    routers: list = field(default_factory=list)
    layer_to_group: tuple = ()

    def __post_init__(self):
        groups = self.layer_to_group
        if list(groups) != sorted(groups):
            raise ValueError("layer_to_group must be non-decreasing")
        if groups and (groups[0] != 0 or groups[-1] != len(self.downs) - 1):
            raise ValueError("layer_to_group must cover all down-projectors")

    def router_index(self, group: int) -> int:
        return 0 if len(self.routers) == 1 else group

    def tensors(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Named view of every tensor, in a stable order."""
        out = {}
        for i, a in enumerate(self.downs):
            out[f"{prefix}A{i}"] = a
        for i, b in enumerate(self.experts):
            out[f"{prefix}B{i}"] = b
        for i, r in enumerate(self.routers):
            out[f"{prefix}R{i}"] = r
        return out


@dataclass
class LoraAdapter:
    """Classic low-rank pair for a single projection: x W0 + scale (x A) B."""

    A: np.ndarray
    B: np.ndarray
    scale: float = 1.0

    def tensors(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {f"{prefix}A": self.A, f"{prefix}B": self.B}


@dataclass(frozen=True)
class RouteWeights:
    """Softmax weights over the expert bank: nonnegative, sum to one."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "weights", w)
        if np.any(w < 0) or abs(float(np.sum(w)) - 1.0) > 1e-12:
            raise ValueError("route weights must be nonnegative and sum to 1")

    def __len__(self):
        return self.weights.size


def uniform_routes(ne_2: int) -> RouteWeights:
    return RouteWeights(np.full(ne_2, 1.0 / ne_2))


# -- forward operations ------------------------------------------------------

def down_project(x: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Project activations into the adapter's low-dimensional space."""
    return matmul(x, a)


def route(x_prime: np.ndarray, router: np.ndarray) -> RouteWeights:
    """Expert weights from the down-projected features.

    Logits are the column sums over all sequence positions of
    x' router^T (so the result is invariant to position order), then a
    stable softmax.
    """
    x_prime = as_matrix(x_prime, "x_prime")
    router = as_matrix(router, "router")
    if x_prime.shape[0] < 1:
        raise ShapeError("x_prime needs at least one row")
    if x_prime.shape[1] != router.shape[1]:
        raise ShapeError(
            f"feature dim {x_prime.shape[1]} != router dim {router.shape[1]}")
    logits = (x_prime @ router.T).sum(axis=0)
    return RouteWeights(softmax_stable(logits))


def combine_experts(weights: RouteWeights, experts: list) -> np.ndarray:
    """Merge the bank into one r x c_out matrix: sum_i S_i B_i.

    This is the cheap side of the equivalence: the scalar-weighted sum is
    formed first and applied with a single subsequent matmul.
    """
    w = weights.weights
    if len(w) != len(experts):
        raise ShapeError(f"{len(w)} weights for {len(experts)} experts")
    merged = experts[0] * w[0]
    for i in range(1, len(experts)):
        merged = merged + experts[i] * w[i]
    return merged


def combine_experts_naive(x_prime: np.ndarray, weights: RouteWeights,
                          experts: list) -> np.ndarray:
    """Reference merge: push x' through every expert, then weight and sum.

    Kept only as the oracle/benchmark counterpart of combine_experts.
    """
    w = weights.weights
    if len(w) != len(experts):
        raise ShapeError(f"{len(w)} weights for {len(experts)} experts")
    out = matmul(x_prime, experts[0]) * w[0]
    for i in range(1, len(experts)):
        out = out + matmul(x_prime, experts[i]) * w[i]
    return out


def lily_forward(x: np.ndarray, w0: np.ndarray, aset: LilyAdapterSet,
                 layer: int, cfg: LilyConfig) -> np.ndarray:
    """Adapted forward for one layer: x W0 + s * x' (sum_i S_i B_i)."""
    if not 0 <= layer < len(aset.layer_to_group):
        raise ValueError(f"layer {layer} out of range")
    g = aset.layer_to_group[layer]
    xp = down_project(x, aset.downs[g])
    if cfg.routed:
        weights = route(xp, aset.routers[aset.router_index(g)])
    else:
        weights = uniform_routes(len(aset.experts))
    merged = combine_experts(weights, aset.experts)
    xd = matmul(xp, merged)
    return matmul(x, w0) + xd * cfg.scale_s


def lora_forward(x: np.ndarray, w0: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """LoRA forward: x W0 + scale (x A) B."""
    return matmul(x, w0) + matmul(matmul(x, adapter.A), adapter.B) * adapter.scale


def effective_delta_w_from(down: np.ndarray, experts: list, weights,
                           scale: float) -> np.ndarray:
    """s A (sum_i w_i B_i) from raw tensors; rank <= r by construction."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(w) != len(experts):
        raise ShapeError(f"{len(w)} weights for {len(experts)} experts")
    merged = experts[0] * w[0]
    for i in range(1, len(experts)):
        merged = merged + experts[i] * w[i]
    return matmul(down, merged) * scale


def effective_delta_w(aset: LilyAdapterSet, layer: int, weights: RouteWeights,
                      scale: float) -> np.ndarray:
    """The weight update the adapter implicitly adds: s A (sum_i S_i B_i)."""
    if not 0 <= layer < len(aset.layer_to_group):
        raise ValueError(f"layer {layer} out of range")
    g = aset.layer_to_group[layer]
    return effective_delta_w_from(aset.downs[g], aset.experts, weights.weights,
                                  scale)


# -- parameter accounting ----------------------------------------------------

def lily_param_count(cfg: LilyConfig, c_in: int, c_out: int, n_layers: int) -> int:
    """Trainable scalars for one family; the frozen base weight is excluded."""
    ne_1 = cfg.effective_ne_1(n_layers)
    n_routers = (1 if cfg.shared_router else ne_1) if cfg.routed else 0
    return (ne_1 * c_in * cfg.rank_r
            + cfg.ne_2 * cfg.rank_r * c_out
            + n_routers * cfg.ne_2 * cfg.rank_r)


def lora_param_count(rank: int, n_layers: int, c_in: int, c_out: int) -> int:
    """Per-layer A/B pairs for one family."""
    return n_layers * (c_in * rank + rank * c_out)


# -- initialization ----------------------------------------------------------

def init_adapters(cfg: LilyConfig, c_in: int, c_out: int, n_layers: int,
                  seed: int, family: str = "") -> LilyAdapterSet:
    """Fresh adapter set: Gaussian A and routers (std 0.02), zero experts.

    Zero experts make the adapted model equal the frozen one at step 0.
    Every tensor draws from its own derived seed, keyed by (family, kind,
    index), so configurations that should share initial values do.
    """
    ne_1 = cfg.effective_ne_1(n_layers)
    downs = [seeded_gaussian(c_in, cfg.rank_r, INIT_STD,
                             derive_seed(seed, family, "A", i))
             for i in range(ne_1)]
    experts = [np.zeros((cfg.rank_r, c_out)) for _ in range(cfg.ne_2)]
    if cfg.routed:
        n_routers = 1 if cfg.shared_router else ne_1
        routers = [seeded_gaussian(cfg.ne_2, cfg.rank_r, INIT_STD,
                                   derive_seed(seed, family, "router", i))
                   for i in range(n_routers)]
    else:
        routers = []
    groups = tuple(layer_group(l, n_layers, ne_1) for l in range(n_layers))
    return LilyAdapterSet(downs, experts, routers, groups)


def init_lora(rank: int, scale: float, c_in: int, c_out: int,
              seed: int, family: str = "", layer: int = 0) -> LoraAdapter:
    """Fresh LoRA pair: Gaussian A (std 0.02), zero B.

    The A seed derivation matches init_adapters' per-index keys, so a
    degenerate routed configuration (one projector per layer, one expert)
    starts bitwise identical to the per-layer LoRA baseline.
    """
    a = seeded_gaussian(c_in, rank, INIT_STD, derive_seed(seed, family, "A", layer))
    return LoraAdapter(a, np.zeros((rank, c_out)), scale)


# -- tape forwards (mirror the direct ones op for op) -------------------------

def lily_tape_forward(tape: Tape, x: Node, w0, aset: LilyAdapterSet,
                      cfg: LilyConfig, layer: int, family: str,
                      trainables: dict, route_sink=None) -> Node:
    """Recorded version of lily_forward; outputs match it bitwise.

    Parameters are registered on the tape under "<family>.A<i>" /
    ".B<i>" / ".R<i>" names read from ``trainables``; shared tensors are
    memoized so layer groups reuse one node. ``route_sink(layer, family,
    weights)`` observes the expert weights of each call.
    """
    g = aset.layer_to_group[layer]
    a_node = tape.param(f"{family}.A{g}", trainables[f"{family}.A{g}"])
    xp = tape.matmul(x, a_node)
    ne_2 = len(aset.experts)
    if cfg.routed:
        ri = aset.router_index(g)
        r_node = tape.param(f"{family}.R{ri}", trainables[f"{family}.R{ri}"])
        logits = tape.sum_rows(tape.matmul(xp, tape.transpose(r_node)))
        s_node = tape.row_softmax(logits)
    else:
        s_node = tape.constant(np.full((1, ne_2), 1.0 / ne_2))
    if route_sink is not None:
        route_sink(layer, family, s_node.value[0].copy())

    merged = None
    for i in range(ne_2):
        b_node = tape.param(f"{family}.B{i}", trainables[f"{family}.B{i}"])
        picker = np.zeros((ne_2, 1))
        picker[i, 0] = 1.0
        s_i = tape.matmul(s_node, tape.constant(picker))
        term = tape.scale(b_node, s_i)
        merged = term if merged is None else tape.add(merged, term)
    xd = tape.matmul(xp, merged)
    w0_node = w0 if isinstance(w0, Node) else tape.constant(w0)
    return tape.add(tape.matmul(x, w0_node), tape.scale(xd, cfg.scale_s))


def lora_tape_forward(tape: Tape, x: Node, w0, adapter: LoraAdapter,
                      layer: int, family: str, trainables: dict) -> Node:
    """Recorded version of lora_forward; outputs match it bitwise."""
    a_node = tape.param(f"{family}.lora{layer}.A", trainables[f"{family}.lora{layer}.A"])
    b_node = tape.param(f"{family}.lora{layer}.B", trainables[f"{family}.lora{layer}.B"])
    delta = tape.matmul(tape.matmul(x, a_node), b_node)
    w0_node = w0 if isinstance(w0, Node) else tape.constant(w0)
    return tape.add(tape.matmul(x, w0_node), tape.scale(delta, adapter.scale))
