"""Toy transformer encoder with adapter injection points.

Pre-norm blocks of multi-head self-attention plus a GELU MLP, a frozen
seeded-Gaussian backbone (embedding, positional table, projections) and
a trainable mean-pool classifier head. Each of the five projection
families (query, key, value, mlp_up, mlp_down) can be wrapped by either
adapter flavor; the head stays trainable in every configuration.

The whole forward is expressed through the tape primitives, so training,
evaluation (with recording disabled) and feature capture all share one
code path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import sqrt

import numpy as np

from . import adapters as ad
from .linalg import derive_seed, matrix_checksum, seeded_gaussian
from .tape import Node, Tape

__all__ = [
    "EncoderConfig", "EncoderModel", "AdapterBundle",
    "build_encoder", "inject", "frozen_bundle", "trainable_arrays",
    "embed_tokens", "encode_tape", "batch_loss_tape",
    "forward_with_features", "logits_batch", "predict", "accuracy",
]


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 6
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab: int = 64
    seq_len: int = 16
    n_classes: int = 4

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab",
                     "seq_len", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    def family_dims(self, family: str) -> tuple[int, int]:
        if family in ("query", "key", "value"):
            return self.d_model, self.d_model
        if family == "mlp_up":
            return self.d_model, self.d_ff
        if family == "mlp_down":
            return self.d_ff, self.d_model
        raise ValueError(f"unknown family {family!r}")


@dataclass
class EncoderModel:
    """Frozen backbone weights plus the trainable classifier head."""

    cfg: EncoderConfig
    embed: np.ndarray
    pos: np.ndarray
    blocks: list  # per layer: dict with query/key/value/out/mlp_up/mlp_down
    head: np.ndarray

    def backbone_tensors(self) -> dict[str, np.ndarray]:
        out = {"embed": self.embed, "pos": self.pos}
        for l, blk in enumerate(self.blocks):
            for name, w in blk.items():
                out[f"block{l}.{name}"] = w
        return out

    def backbone_checksum(self) -> str:
        return matrix_checksum(self.backbone_tensors().values())


def build_encoder(cfg: EncoderConfig, seed: int) -> EncoderModel:
    """Seeded-Gaussian backbone; weight std 1/sqrt(fan_in) keeps activations O(1)."""
    d, ff = cfg.d_model, cfg.d_ff

    def gauss(rows, cols, std, *tags):
        return seeded_gaussian(rows, cols, std, derive_seed(seed, *tags))

    blocks = []
    for l in range(cfg.n_layers):
        blocks.append({
            "query": gauss(d, d, 1 / sqrt(d), "block", l, "query"),
            "key": gauss(d, d, 1 / sqrt(d), "block", l, "key"),
            "value": gauss(d, d, 1 / sqrt(d), "block", l, "value"),
            "out": gauss(d, d, 1 / sqrt(d), "block", l, "out"),
            "mlp_up": gauss(d, ff, 1 / sqrt(d), "block", l, "mlp_up"),
            "mlp_down": gauss(ff, d, 1 / sqrt(ff), "block", l, "mlp_down"),
        })
    return EncoderModel(
        cfg=cfg,
        embed=gauss(cfg.vocab, d, 1.0, "embed"),
        pos=gauss(cfg.seq_len, d, 1.0, "pos"),
        blocks=blocks,
        head=gauss(d, cfg.n_classes, 1 / sqrt(d), "head"),
    )


@dataclass
class AdapterBundle:
    """Adapters for every placed family; kind is "lily", "lora" or "none"."""

    kind: str
    cfg: object = None
    families: dict = field(default_factory=dict)
    placement: frozenset = frozenset()

    def tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for family in sorted(self.families, key=ad.TARGETS.index):
            adapter = self.families[family]
            if self.kind == "lily":
                out.update(adapter.tensors(prefix=f"{family}."))
            else:
                for l, lora in enumerate(adapter):
                    out.update(lora.tensors(prefix=f"{family}.lora{l}."))
        return out

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors().values())

    def report_family(self) -> str | None:
        """The family whose routes and weight updates analyses report on."""
        for family in ad.TARGETS:
            if family in self.families:
                return family
        return None


def inject(model: EncoderModel, placement: frozenset, cfg, seed: int) -> AdapterBundle:
    """Wrap every placed projection in every layer with fresh adapters.

    Routed adapters share their down-projectors across layer groups and
    one expert bank per family across all layers; the LoRA baseline gets
    an independent pair per layer. cfg decides the flavor by type.
    """
    if not placement:
        raise ValueError("placement must name at least one target")
    unknown = placement - set(ad.TARGETS)
    if unknown:
        raise ValueError(f"placement targets not in model: {sorted(unknown)}")
    mcfg = model.cfg
    families: dict = {}
    if isinstance(cfg, ad.LilyConfig):
        kind = "lily"
        for family in sorted(placement, key=ad.TARGETS.index):
            c_in, c_out = mcfg.family_dims(family)
            families[family] = ad.init_adapters(
                cfg, c_in, c_out, mcfg.n_layers, seed, family=family)
    elif isinstance(cfg, ad.LoraConfig):
        kind = "lora"
        for family in sorted(placement, key=ad.TARGETS.index):
            c_in, c_out = mcfg.family_dims(family)
            families[family] = [
                ad.init_lora(cfg.rank_r, cfg.scale_s, c_in, c_out, seed,
                             family=family, layer=l)
                for l in range(mcfg.n_layers)
            ]
    else:
        raise TypeError(f"unsupported adapter config {type(cfg).__name__}")
    return AdapterBundle(kind=kind, cfg=cfg, families=families,
                         placement=frozenset(placement))


def frozen_bundle() -> AdapterBundle:
    """No adapters at all; only the head trains (linear probing)."""
    return AdapterBundle(kind="none")


def trainable_arrays(model: EncoderModel, bundle: AdapterBundle) -> dict[str, np.ndarray]:
    """Live views of everything the optimizer may update."""
    out = {"head.W": model.head}
    out.update(bundle.tensors())
    return out


# -- forward -----------------------------------------------------------------

_SELECTORS: dict = {}


def _head_selectors(d_model: int, n_heads: int) -> list[np.ndarray]:
    key = (d_model, n_heads)
    if key not in _SELECTORS:
        dh = d_model // n_heads
        sels = []
        for h in range(n_heads):
            e = np.zeros((d_model, dh))
            e[h * dh:(h + 1) * dh] = np.eye(dh)
            sels.append(e)
        _SELECTORS[key] = sels
    return _SELECTORS[key]


def embed_tokens(model: EncoderModel, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    cfg = model.cfg
    if tokens.shape[0] != cfg.seq_len:
        raise ValueError(f"expected {cfg.seq_len} tokens, got {tokens.shape[0]}")
    if np.any(tokens < 0) or np.any(tokens >= cfg.vocab):
        bad = int(tokens[(tokens < 0) | (tokens >= cfg.vocab)][0])
        raise ValueError(f"token {bad} outside vocab [0, {cfg.vocab})")
    return model.embed[tokens] + model.pos


def _proj(tape: Tape, x: Node, model: EncoderModel, bundle: AdapterBundle,
          family: str, layer: int, trainables: dict, route_sink) -> Node:
    w0 = model.blocks[layer][family]
    adapter = bundle.families.get(family)
    if adapter is None:
        return tape.matmul(x, tape.constant(w0))
    if bundle.kind == "lily":
        return ad.lily_tape_forward(tape, x, w0, adapter, bundle.cfg, layer,
                                    family, trainables, route_sink)
    return ad.lora_tape_forward(tape, x, w0, adapter[layer], layer, family,
                                trainables)


def encode_tape(tape: Tape, model: EncoderModel, bundle: AdapterBundle,
                tokens, trainables: dict, route_sink=None,
                features: list | None = None) -> Node:
    """One example through the encoder; returns the 1 x n_classes logits node."""
    cfg = model.cfg
    x = tape.constant(embed_tokens(model, tokens))
    sels = _head_selectors(cfg.d_model, cfg.n_heads)
    dh = cfg.d_model // cfg.n_heads
    inv_sqrt_dh = 1.0 / sqrt(dh)
    for l in range(cfg.n_layers):
        h = tape.layer_norm(x)
        q = _proj(tape, h, model, bundle, "query", l, trainables, route_sink)
        k = _proj(tape, h, model, bundle, "key", l, trainables, route_sink)
        v = _proj(tape, h, model, bundle, "value", l, trainables, route_sink)
        attn = None
        for sel in sels:
            e = tape.constant(sel)
            qh = tape.matmul(q, e)
            kh = tape.matmul(k, e)
            vh = tape.matmul(v, e)
            scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt_dh)
            oh = tape.matmul(tape.row_softmax(scores), vh)
            contrib = tape.matmul(oh, tape.transpose(e))
            attn = contrib if attn is None else tape.add(attn, contrib)
        x = tape.add(x, tape.matmul(attn, tape.constant(model.blocks[l]["out"])))
        h2 = tape.layer_norm(x)
        u = tape.gelu(_proj(tape, h2, model, bundle, "mlp_up", l, trainables,
                            route_sink))
        dn = _proj(tape, u, model, bundle, "mlp_down", l, trainables, route_sink)
        x = tape.add(x, dn)
        if features is not None:
            features.append(x.value.copy())
    pooled = tape.scale(tape.sum_rows(tape.layer_norm(x)), 1.0 / cfg.seq_len)
    head = tape.param("head.W", trainables["head.W"])
    return tape.matmul(pooled, head)


def batch_loss_tape(tape: Tape, model: EncoderModel, bundle: AdapterBundle,
                    tokens_batch, labels, trainables: dict,
                    route_sink=None) -> Node:
    """Mean cross-entropy over a batch of examples."""
    tokens_batch = np.asarray(tokens_batch, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    acc = None
    for row, label in zip(tokens_batch, labels):
        logits = encode_tape(tape, model, bundle, row, trainables, route_sink)
        loss_i = tape.cross_entropy(logits, [int(label)])
        acc = loss_i if acc is None else tape.add(acc, loss_i)
    return tape.scale(acc, 1.0 / len(labels))


def forward_with_features(model: EncoderModel, bundle: AdapterBundle,
                          tokens) -> tuple[np.ndarray, list]:
    """Logits plus the residual-stream output of every block."""
    features: list = []
    tape = Tape(grad_enabled=False)
    logits = encode_tape(tape, model, bundle, tokens,
                         trainable_arrays(model, bundle), features=features)
    return logits.value[0].copy(), features


def logits_batch(model: EncoderModel, bundle: AdapterBundle,
                 tokens_batch) -> np.ndarray:
    """Stacked logits, one row per example, recording disabled."""
    trainables = trainable_arrays(model, bundle)
    tape = Tape(grad_enabled=False)
    rows = np.asarray(tokens_batch, dtype=np.int64)
    out = np.empty((len(rows), model.cfg.n_classes))
    for i, row in enumerate(rows):
        out[i] = encode_tape(tape, model, bundle, row, trainables).value[0]
    return out


def pooled_features(model: EncoderModel, bundle: AdapterBundle,
                    tokens_batch) -> np.ndarray:
    """The mean-pooled pre-head representation, one row per example."""
    trainables = trainable_arrays(model, bundle)
    tape = Tape(grad_enabled=False)
    rows = np.asarray(tokens_batch, dtype=np.int64)
    out = np.empty((len(rows), model.cfg.d_model))
    for i, row in enumerate(rows):
        feats: list = []
        encode_tape(tape, model, bundle, row, trainables, features=feats)
        normed = tape.layer_norm(tape.constant(feats[-1]))
        out[i] = normed.value.mean(axis=0)
    return out


def predict(model: EncoderModel, bundle: AdapterBundle, tokens_batch) -> np.ndarray:
    return np.argmax(logits_batch(model, bundle, tokens_batch), axis=1)


def accuracy(model: EncoderModel, bundle: AdapterBundle, tokens_batch,
             labels) -> float:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    return float(np.mean(predict(model, bundle, tokens_batch) == labels))
