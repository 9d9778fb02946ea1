"""Minimal decoder-style transformer hosting the expert mixture.

The frozen base (embeddings, attention weights, layer norms, FFN, output
head) is a seeded Gaussian surrogate for pretrained weights; the only
trainable state lives in an AdapterSet: per-layer attention LoRA adapters
plus either expert triples + router (mixture) or one FFN triple (plain
LoRA baseline). Residual structure per layer:

    z = MSA(LN1(h)) + h
    h' = FfnBlock(LN2(z)) + z
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError
from .lora import FrozenLinear, LoraAdapter, adapted_forward
from .moe import (
    DenseLoraFfn,
    ExpertAdapters,
    ExpertTriple,
    MixLoraBlock,
    Router,
    RoutingStats,
    SharedFfn,
    aux_loss,
    dense_ffn_forward,
)
from .numerics import (
    Tape,
    Tensor,
    add,
    backward,
    concat_cols,
    concat_rows,
    cross_entropy,
    flop_labels,
    layer_norm,
    matmul,
    scale,
    softmax_lastdim,
    take_cols,
    take_rows,
    transpose,
)
from .optim import Adam

INIT_STD = 0.02  # stand-in "pretrained" weight scale


@dataclass
class ModelConfig:
    vocab_size: int = 8192
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_layers: int = 2
    n_experts: int = 8
    top_k: int = 2
    lora_rank: int = 16
    lora_alpha: float = 32.0
    dropout_p: float = 0.05
    aux_coef: float = 1e-2
    max_seq_len: int = 64
    dropout_scope: str = "both"  # both | attention | experts
    router_count_topk: bool = False

    def validate(self) -> "ModelConfig":
        positive = {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "n_layers": self.n_layers,
            "n_experts": self.n_experts,
            "top_k": self.top_k,
            "lora_rank": self.lora_rank,
            "max_seq_len": self.max_seq_len,
        }
        for name, value in positive.items():
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.n_experts < 2:
            raise ConfigError(f"n_experts must be >= 2, got {self.n_experts}")
        if self.top_k > self.n_experts:
            raise ConfigError(
                f"top_k {self.top_k} exceeds n_experts {self.n_experts}"
            )
        if self.lora_rank > min(self.d_model, self.d_ff):
            raise ConfigError(
                f"lora_rank {self.lora_rank} exceeds min(d_model, d_ff) "
                f"= {min(self.d_model, self.d_ff)}"
            )
        if self.lora_alpha <= 0:
            raise ConfigError(f"lora_alpha must be positive, got {self.lora_alpha}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p {self.dropout_p} outside [0, 1)")
        if self.aux_coef < 0:
            raise ConfigError(f"aux_coef must be >= 0, got {self.aux_coef}")
        if self.dropout_scope not in ("both", "attention", "experts"):
            raise ConfigError(f"unknown dropout_scope {self.dropout_scope!r}")
        return self


class LayerWeights:
    """Frozen per-layer weights: two layer norms, attention, shared FFN."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype):
        d, dff = config.d_model, config.d_ff

        def lin(rows, cols):
            return FrozenLinear(rng.normal(0.0, INIT_STD, size=(rows, cols)).astype(dtype))

        self.wq = lin(d, d)
        self.wk = lin(d, d)
        self.wv = lin(d, d)
        self.wo = lin(d, d)
        self.ffn = SharedFfn(lin(dff, d), lin(dff, d), lin(d, dff))
        self.ln1_g = Tensor(np.ones(d, dtype=dtype))
        self.ln1_b = Tensor(np.zeros(d, dtype=dtype))
        self.ln2_g = Tensor(np.ones(d, dtype=dtype))
        self.ln2_b = Tensor(np.zeros(d, dtype=dtype))


class FrozenBase:
    """All frozen storage of one model; shared verbatim across adapter sets."""

    def __init__(self, config: ModelConfig, seed: int, dtype=np.float64):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng([int(seed), 0])
        d = config.d_model
        self.tok_emb = Tensor(
            rng.normal(0.0, INIT_STD, size=(config.vocab_size, d)).astype(dtype)
        )
        self.pos_emb = Tensor(
            rng.normal(0.0, INIT_STD, size=(config.max_seq_len, d)).astype(dtype)
        )
        self.layers = [LayerWeights(config, rng, dtype) for _ in range(config.n_layers)]
        self.head = FrozenLinear(
            rng.normal(0.0, INIT_STD, size=(config.vocab_size, d)).astype(dtype)
        )

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [("base.tok_emb", self.tok_emb), ("base.pos_emb", self.pos_emb)]
        for i, lw in enumerate(self.layers):
            p = f"base.layer{i}"
            out += [
                (f"{p}.ln1.gain", lw.ln1_g),
                (f"{p}.ln1.bias", lw.ln1_b),
                (f"{p}.ln2.gain", lw.ln2_g),
                (f"{p}.ln2.bias", lw.ln2_b),
                (f"{p}.attn.wq", lw.wq.w),
                (f"{p}.attn.wk", lw.wk.w),
                (f"{p}.attn.wv", lw.wv.w),
                (f"{p}.attn.wo", lw.wo.w),
                (f"{p}.ffn.w1", lw.ffn.w1.w),
                (f"{p}.ffn.w3", lw.ffn.w3.w),
                (f"{p}.ffn.w2", lw.ffn.w2.w),
            ]
        out.append(("base.head", self.head.w))
        return out

    def nbytes(self) -> int:
        return sum(t.data.nbytes for _, t in self.named_tensors())

    def checksum(self) -> bytes:
        import hashlib

        h = hashlib.sha256()
        for name, t in self.named_tensors():
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.digest()


class LayerAdapters:
    """Trainable pieces of one layer for a given adapter-set kind."""

    def __init__(self, attn: dict[str, LoraAdapter],
                 experts: ExpertAdapters | None = None,
                 router: Router | None = None,
                 ffn_triple: ExpertTriple | None = None):
        self.attn = attn
        self.experts = experts
        self.router = router
        self.ffn_triple = ffn_triple


def _set_salt(set_id: str) -> int:
    return zlib.crc32(set_id.encode("utf-8"))


class AdapterSet:
    """All trainable state of one logical model over the shared frozen base."""

    def __init__(self, set_id: str, kind: str, layers: list[LayerAdapters],
                 aux_coef: float, dropout_rng: np.random.Generator):
        if kind not in ("mixlora", "lora"):
            raise ConfigError(f"unknown adapter-set kind {kind!r}")
        self.set_id = set_id
        self.kind = kind
        self.layers = layers
        self.aux_coef = float(aux_coef)
        self.dropout_rng = dropout_rng
        self.optimizer: Adam | None = None

    @classmethod
    def create(
        cls,
        config: ModelConfig,
        set_id: str = "main",
        seed: int = 0,
        kind: str = "mixlora",
        rank: int | None = None,
        dtype=np.float64,
        lr: float = 2e-4,
        aux_coef: float | None = None,
    ) -> "AdapterSet":
        config.validate()
        r = config.lora_rank if rank is None else rank
        # Keep alpha/rank fixed when the rank is overridden so the delta
        # scaling stays comparable across parameter budgets.
        alpha = config.lora_alpha * (r / config.lora_rank)
        salt = _set_salt(set_id)
        rng = np.random.default_rng([int(seed), 1, salt])
        drop_rng = np.random.default_rng([int(seed), 2, salt])
        d, dff = config.d_model, config.d_ff
        p_attn = config.dropout_p if config.dropout_scope in ("both", "attention") else 0.0
        p_exp = config.dropout_p if config.dropout_scope in ("both", "experts") else 0.0

        def adapter(d_in, d_out, p):
            return LoraAdapter.create(d_in, d_out, r, alpha, p, rng, dtype)

        layers = []
        for _ in range(config.n_layers):
            attn = {name: adapter(d, d, p_attn) for name in ("q", "k", "v", "o")}
            if kind == "mixlora":
                triples = [
                    ExpertTriple(
                        w1=adapter(d, dff, p_exp),
                        w3=adapter(d, dff, p_exp),
                        w2=adapter(dff, d, p_exp),
                    )
                    for _ in range(config.n_experts)
                ]
                router = Router.create(config.n_experts, d, config.top_k, rng, dtype)
                layers.append(LayerAdapters(attn, ExpertAdapters(triples), router))
            else:
                triple = ExpertTriple(
                    w1=adapter(d, dff, p_exp),
                    w3=adapter(d, dff, p_exp),
                    w2=adapter(dff, d, p_exp),
                )
                layers.append(LayerAdapters(attn, ffn_triple=triple))
        out = cls(set_id, kind, layers,
                  config.aux_coef if aux_coef is None else aux_coef, drop_rng)
        out.optimizer = Adam(out.parameters(), lr=lr)
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, la in enumerate(self.layers):
            p = f"set.layer{i}"
            for name in ("q", "k", "v", "o"):
                ad = la.attn[name]
                out += [(f"{p}.attn.{name}.A", ad.a), (f"{p}.attn.{name}.B", ad.b)]
            if la.experts is not None:
                for k, triple in enumerate(la.experts.triples):
                    for proj in ("w1", "w3", "w2"):
                        ad = getattr(triple, proj)
                        out += [
                            (f"{p}.expert{k}.{proj}.A", ad.a),
                            (f"{p}.expert{k}.{proj}.B", ad.b),
                        ]
                out.append((f"{p}.router", la.router.wr))
            if la.ffn_triple is not None:
                for proj in ("w1", "w3", "w2"):
                    ad = getattr(la.ffn_triple, proj)
                    out += [
                        (f"{p}.ffn.{proj}.A", ad.a),
                        (f"{p}.ffn.{proj}.B", ad.b),
                    ]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def trainable_count(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def param_bytes(self) -> int:
        return sum(t.data.nbytes for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def trainable_parameter_count(config: ModelConfig, kind: str = "mixlora",
                              rank: int | None = None) -> int:
    """Closed-form census: attention adapters + expert triples + routers."""
    r = config.lora_rank if rank is None else rank
    d, dff = config.d_model, config.d_ff
    attn = 4 * r * (d + d)
    if kind == "mixlora":
        per_layer = attn + config.n_experts * 3 * r * (d + dff) + config.n_experts * d
    else:
        per_layer = attn + 3 * r * (d + dff)
    return config.n_layers * per_layer


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Token sequences plus flat target positions/labels into [B*T] rows."""

    tokens: np.ndarray      # [B, T] int
    positions: np.ndarray   # [P] flat row indices with a loss
    labels: np.ndarray      # [P] target token ids


@dataclass
class LossOutput:
    total: Tensor
    task: Tensor
    aux: Tensor
    stats: list[RoutingStats] = field(default_factory=list)


def attention_forward(lw: LayerWeights, attn_adapters: dict | None, x: Tensor,
                      n_seqs: int, seq_len: int, n_heads: int, mask: Tensor,
                      training: bool = False,
                      rng: np.random.Generator | None = None) -> Tensor:
    """Multi-head causal self-attention with adapted q/k/v/o projections."""

    def project(frozen, name):
        if attn_adapters is None:
            return frozen.apply(x)
        return adapted_forward(frozen, attn_adapters[name], x, training, rng)

    q = project(lw.wq, "q")
    k = project(lw.wk, "k")
    v = project(lw.wv, "v")
    d_model = q.shape[1]
    d_head = d_model // n_heads
    inv_sqrt = 1.0 / math.sqrt(d_head)
    seq_outs = []
    for b in range(n_seqs):
        rows = np.arange(b * seq_len, (b + 1) * seq_len)
        qb, kb, vb = take_rows(q, rows), take_rows(k, rows), take_rows(v, rows)
        heads = []
        for hh in range(n_heads):
            j0 = hh * d_head
            qh = take_cols(qb, j0, j0 + d_head)
            kh = take_cols(kb, j0, j0 + d_head)
            vh = take_cols(vb, j0, j0 + d_head)
            scores = add(scale(matmul(qh, transpose(kh)), inv_sqrt), mask)
            heads.append(matmul(softmax_lastdim(scores), vh))
        seq_outs.append(concat_cols(heads))
    merged = seq_outs[0] if n_seqs == 1 else concat_rows(seq_outs)
    if attn_adapters is None:
        return lw.wo.apply(merged)
    return adapted_forward(lw.wo, attn_adapters["o"], merged, training, rng)


def layer_forward(lw: LayerWeights, la: LayerAdapters | None, block, h: Tensor,
                  mode: str, n_seqs: int, seq_len: int, n_heads: int, mask: Tensor,
                  training: bool = False,
                  rng: np.random.Generator | None = None
                  ) -> tuple[Tensor, RoutingStats | None]:
    attn_adapters = la.attn if la is not None else None
    x1 = layer_norm(h, lw.ln1_g, lw.ln1_b)
    attn = attention_forward(lw, attn_adapters, x1, n_seqs, seq_len, n_heads,
                             mask, training, rng)
    z = add(attn, h)
    x2 = layer_norm(z, lw.ln2_g, lw.ln2_b)
    if block is None:
        f, st = dense_ffn_forward(lw.ffn, x2), None
    else:
        f, st = block.forward(x2, mode, training, rng)
    return add(f, z), st


class ToyModel:
    """Frozen base + one adapter set (or none, for the dense reference)."""

    def __init__(self, config: ModelConfig, base: FrozenBase,
                 adapters: AdapterSet | None):
        self.config = config
        self.base = base
        self.adapters = adapters
        self.dtype = base.dtype
        self._masks: dict[int, Tensor] = {}
        self.blocks: list = []
        for i in range(config.n_layers):
            if adapters is None:
                self.blocks.append(None)
            elif adapters.kind == "mixlora":
                la = adapters.layers[i]
                self.blocks.append(
                    MixLoraBlock(
                        la.router,
                        base.layers[i].ffn,
                        la.experts,
                        aux_coef=adapters.aux_coef,
                        count_topk_dispatch=config.router_count_topk,
                        layer_index=i,
                    )
                )
            else:
                la = adapters.layers[i]
                self.blocks.append(DenseLoraFfn(base.layers[i].ffn, la.ffn_triple))

    def _mask(self, t: int) -> Tensor:
        if t not in self._masks:
            m = np.triu(np.full((t, t), -np.inf, dtype=self.dtype), k=1)
            self._masks[t] = Tensor(m)
        return self._masks[t]

    def hidden_states(self, tokens: np.ndarray, mode: str = "optimized",
                      training: bool = False) -> tuple[Tensor, list[RoutingStats]]:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise DimensionError(f"tokens must be [batch, seq], got {tokens.shape}")
        n_seqs, seq_len = tokens.shape
        if seq_len > self.config.max_seq_len:
            raise DimensionError(
                f"sequence length {seq_len} exceeds max_seq_len {self.config.max_seq_len}"
            )
        flat = tokens.reshape(-1)
        pos = np.tile(np.arange(seq_len), n_seqs)
        h = Tensor(self.base.tok_emb.data[flat] + self.base.pos_emb.data[pos])
        mask = self._mask(seq_len)
        rng = self.adapters.dropout_rng if self.adapters is not None else None
        stats: list[RoutingStats] = []
        for i, (lw, block) in enumerate(zip(self.base.layers, self.blocks)):
            la = self.adapters.layers[i] if self.adapters is not None else None
            with flop_labels(layer=i):
                h, st = layer_forward(lw, la, block, h, mode, n_seqs, seq_len,
                                      self.config.n_heads, mask, training, rng)
            if not np.all(np.isfinite(h.data)):
                raise NumericError(f"non-finite activations in layer {i}")
            if st is not None:
                stats.append(st)
        return h, stats

    def logits_at(self, tokens: np.ndarray, positions: np.ndarray,
                  mode: str = "optimized", training: bool = False
                  ) -> tuple[Tensor, list[RoutingStats]]:
        h, stats = self.hidden_states(tokens, mode, training)
        rows = take_rows(h, np.asarray(positions, dtype=np.intp))
        return self.base.head.apply(rows), stats

    def logits_all(self, tokens: np.ndarray, mode: str = "optimized",
                   training: bool = False) -> tuple[Tensor, list[RoutingStats]]:
        h, stats = self.hidden_states(tokens, mode, training)
        return self.base.head.apply(h), stats


def build_model(config: ModelConfig, seed: int, kind: str = "mixlora",
                rank: int | None = None, dtype=np.float64, lr: float = 2e-4,
                aux_coef: float | None = None, set_id: str = "main") -> ToyModel:
    base = FrozenBase(config, seed, dtype)
    adapters = AdapterSet.create(config, set_id, seed, kind, rank, dtype, lr, aux_coef)
    return ToyModel(config, base, adapters)


def model_loss(model: ToyModel, batch: Batch, mode: str = "optimized",
               training: bool = True) -> LossOutput:
    """Cross-entropy at the batch's target positions plus per-layer balance loss."""
    logits, stats = model.logits_at(batch.tokens, batch.positions, mode, training)
    task = cross_entropy(logits, batch.labels)
    coef = model.adapters.aux_coef if model.adapters is not None else 0.0
    aux_total: Tensor | None = None
    for st in stats:
        term = aux_loss(st, model.config.n_experts, coef)
        aux_total = term if aux_total is None else add(aux_total, term)
    if aux_total is None:
        aux_total = Tensor(np.asarray(0.0, dtype=model.dtype))
        total = task
    else:
        total = add(task, aux_total)
    for name, t in (("total", total), ("task", task), ("aux", aux_total)):
        if not np.isfinite(t.data):
            raise NumericError(f"non-finite {name} loss")
    return LossOutput(total, task, aux_total, stats)


def train_step(model: ToyModel, batch: Batch, mode: str = "optimized") -> dict:
    """One forward/backward/update; only adapter-set parameters change."""
    if model.adapters is None or model.adapters.optimizer is None:
        raise ContractError("train_step needs an adapter set with an optimizer")
    opt = model.adapters.optimizer
    tape = Tape()
    with tape:
        out = model_loss(model, batch, mode, training=True)
    backward(tape, out.total)
    for name, t in model.adapters.named_parameters():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise NumericError(f"non-finite gradient for {name}")
    opt.step()
    opt.zero_grad()
    return {
        "total": out.total.item(),
        "task": out.task.item(),
        "aux": out.aux.item(),
        "stats": out.stats,
    }
