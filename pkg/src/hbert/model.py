"""Encoders for the four ablation variants, plus the MLM and task heads.

HB:     token embedding -> one GATv2-style graph attention layer over the
        visit's ontology subgraph -> transformer encoder stack
BERTO:  same decomposed tokens, no graph attention
LEAFO:  leaf tokens only, no graph attention
LEAFO6: LEAFO with six transformer blocks instead of four

No variant uses position embeddings because a visit is an unordered token set.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .ontology import MASK, PAD, TokenMode
from .tensor import Tensor


class IsolatedNode(ValueError):
    pass


class EmptyVisit(ValueError):
    pass


class Variant(str, enum.Enum):
    HB = "HB"
    BERTO = "BERTO"
    LEAFO = "LEAFO"
    LEAFO6 = "LEAFO6"


N_SPECIAL = 3


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant
    vocab_size: int
    n_tasks: int
    max_seq_len: int = 128
    d_model: int = 64
    n_transformer_blocks: int = 4
    n_attn_heads: int = 8
    ffn_hidden: int = 128
    hidden_dropout: float = 0.4
    attn_dropout: float = 0.1
    gat_heads: int = 8
    gat_head_combine: str = "AVERAGE"
    gat_residual: bool = False
    leaky_slope: float = 0.2
    init_scale: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.d_model % self.n_attn_heads:
            raise ValueError("d_model must be divisible by n_attn_heads")
        if self.gat_head_combine != "AVERAGE":
            raise ValueError("only head averaging is supported")

    @classmethod
    def for_variant(cls, variant: Variant | str, vocab_size: int, n_tasks: int, **overrides) -> "ModelConfig":
        variant = Variant(variant)
        blocks = 6 if variant is Variant.LEAFO6 else 4
        overrides.setdefault("n_transformer_blocks", blocks)
        return cls(variant=variant, vocab_size=vocab_size, n_tasks=n_tasks, **overrides)

    @property
    def uses_gat(self) -> bool:
        return self.variant is Variant.HB

    @property
    def token_mode(self) -> TokenMode:
        if self.variant in (Variant.HB, Variant.BERTO):
            return TokenMode.DECOMPOSED
        return TokenMode.LEAF_ONLY

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d


@dataclass(frozen=True)
class GatLayer:
    W: Tensor          # [heads, d_in, d_out]; heads are averaged so d_out = d_model
    a: Tensor          # [heads, d_out]
    bias: Tensor       # [d_out]
    slope: float = 0.2

    @property
    def heads(self) -> int:
        return self.W.shape[0]


@dataclass
class VisitBatch:
    """Padded visits. ``pad_mask`` is True at PAD positions."""

    token_ids: np.ndarray
    pad_mask: np.ndarray
    edges: list = field(default_factory=list)
    labels: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.token_ids.shape

    @classmethod
    def from_examples(cls, examples: Sequence[tuple[Sequence[int], Sequence[tuple[int, int]]]],
                      labels=None, length: int | None = None) -> "VisitBatch":
        L = length or max(len(ids) for ids, _ in examples)
        ids = np.full((len(examples), L), PAD, dtype=np.int64)
        for b, (toks, _) in enumerate(examples):
            ids[b, :len(toks)] = toks
        lab = None if labels is None else np.asarray(labels, dtype=np.float64)
        return cls(ids, ids == PAD, [list(e) for _, e in examples], lab)

    def graph(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Real (non-PAD) nodes of the whole batch as one graph.

        Returns the flat ``B*L`` positions of the real nodes and directed
        ``(src, dst)`` arrays indexing into that compact node list. Tokens are
        left-aligned, so position ``i`` of example ``b`` is compact node
        ``offset[b] + i``.
        """
        keep = ~self.pad_mask
        flat = np.flatnonzero(keep.reshape(-1))
        offsets = np.r_[0, np.cumsum(keep.sum(axis=1))[:-1]]
        src, dst = [], []
        for b, pairs in enumerate(self.edges):
            s, d = directed_edges(pairs, 0)
            src.append(s + offsets[b])
            dst.append(d + offsets[b])
        cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64)
        return flat, cat(src), cat(dst)


# ---------------------------------------------------------------------------
# parameters


def _uniform(rng, shape, scale) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def init_encoder(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d, s = cfg.d_model, cfg.init_scale
    p = {"embed": _uniform(rng, (cfg.vocab_size, d), s)}
    if cfg.uses_gat:
        p["gat.W"] = _uniform(rng, (cfg.gat_heads, d, d), s)
        p["gat.a"] = _uniform(rng, (cfg.gat_heads, d), s)
        p["gat.bias"] = _zeros((d,))
    for i in range(cfg.n_transformer_blocks):
        k = f"block{i}."
        p[k + "qkv.W"], p[k + "qkv.b"] = _uniform(rng, (d, 3 * d), s), _zeros((3 * d,))
        p[k + "o.W"], p[k + "o.b"] = _uniform(rng, (d, d), s), _zeros((d,))
        p[k + "ln1.g"], p[k + "ln1.b"] = _ones((d,)), _zeros((d,))
        p[k + "ffn1.W"], p[k + "ffn1.b"] = _uniform(rng, (d, cfg.ffn_hidden), s), _zeros((cfg.ffn_hidden,))
        p[k + "ffn2.W"], p[k + "ffn2.b"] = _uniform(rng, (cfg.ffn_hidden, d), s), _zeros((d,))
        p[k + "ln2.g"], p[k + "ln2.b"] = _ones((d,)), _zeros((d,))
    return p


def init_mlm_head(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    return {"mlm.W": _uniform(rng, (cfg.d_model, cfg.vocab_size), cfg.init_scale),
            "mlm.b": _zeros((cfg.vocab_size,))}


def init_task_head(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    return {"task.W": _uniform(rng, (cfg.d_model, cfg.n_tasks), cfg.init_scale),
            "task.b": _zeros((cfg.n_tasks,))}


def count_parameters(params: dict[str, Tensor]) -> int:
    return sum(t.size for t in params.values() if t.requires_grad)


def gat_layer(params: dict[str, Tensor], slope: float = 0.2) -> GatLayer:
    return GatLayer(params["gat.W"], params["gat.a"], params["gat.bias"], slope)


# ---------------------------------------------------------------------------
# graph attention


def directed_edges(edges, n_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Undirected ``(i, j)`` pairs -> (src, dst) arrays with both directions."""
    src, dst = [], []
    for i, j in edges:
        src.append(j)
        dst.append(i)
        if i != j:
            src.append(i)
            dst.append(j)
    return np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64)


def _project(h: Tensor, layer: GatLayer) -> Tensor:
    H, din, dout = layer.W.shape
    Wflat = layer.W.transpose(1, 0, 2).reshape(din, H * dout)
    return T.linear(h, Wflat).reshape(h.shape[0], H, dout)


def _scores(z: Tensor, src, dst, layer: GatLayer) -> tuple[Tensor, Tensor]:
    """e_ij = a . leaky_relu(W x_i + W x_j): nonlinearity before the dot product.

    Also returns the gathered source rows W x_j for message passing.
    """
    zj = T.take_rows(z, src)
    return T.additive_scores(T.take_rows(z, dst), zj, layer.a, layer.slope), zj


def gat_forward(h: Tensor, edges, layer: GatLayer, training: bool = False,
                rng: np.random.Generator | None = None, attn_dropout: float = 0.1,
                residual: bool = False, trace: dict | None = None) -> Tensor:
    """One graph attention layer over ``h[N, d]``.

    ``edges`` is either a list of undirected pairs (self-loops included) or a
    ``(src, dst)`` pair of directed index arrays.
    """
    N = h.shape[0]
    if isinstance(edges, tuple) and len(edges) == 2 and isinstance(edges[0], np.ndarray):
        src, dst = edges
    else:
        src, dst = directed_edges(edges, N)
    if N and np.bincount(dst, minlength=N).min() == 0:
        raise IsolatedNode("every node needs at least one incoming edge (add self-loops)")
    z = _project(h, layer)
    scores, zj = _scores(z, src, dst, layer)
    alpha = T.segment_softmax(scores, dst, N)
    if trace is not None:
        trace.setdefault("gat", []).append((src.copy(), dst.copy(), alpha.data.copy()))
    alpha = T.dropout(alpha, attn_dropout, rng, training)
    E, H = alpha.shape
    msg = zj * alpha.reshape(E, H, 1)
    out = T.tmean(T.scatter_add_rows(msg, dst, N), axis=1) + layer.bias
    return out + h if residual else out


def attention_order_check(x, edges, layer: GatLayer | None = None) -> bool:
    """True iff the layer's scorer matches the nonlinearity-then-dot ordering.

    The reference is enumerated pair by pair, independently of the vectorised
    scorer. Rankings follow from the scores, so matching scores implies the
    scorer can rank neighbours differently per query (which a
    dot-then-nonlinearity scorer cannot).
    """
    x = np.asarray(x, dtype=np.float64)
    if layer is None:
        layer = crafted_order_case()[2]
    src, dst = directed_edges(edges, len(x))
    if len(src) == 0:
        return True
    with T.no_grad():
        got = _scores(_project(Tensor(x), layer), src, dst, layer)[0].data
    W, a, slope = layer.W.data, layer.a.data, layer.slope
    want = np.empty_like(got)
    for e, (j, i) in enumerate(zip(src, dst)):
        for h in range(W.shape[0]):
            u = x[i] @ W[h] + x[j] @ W[h]
            want[e, h] = float(a[h] @ np.where(u > 0, u, slope * u))
    return bool(np.allclose(got, want, rtol=1e-12, atol=1e-12))


def crafted_order_case() -> tuple[np.ndarray, list[tuple[int, int]], GatLayer]:
    """Two queries (nodes 0, 1) over three shared neighbours (nodes 2-4).

    With W = I and a = (1, 1) a static scorer ranks neighbour 4 first for
    both queries; the dynamic scorer prefers neighbour 3 for query 0 and
    neighbour 2 for query 1.
    """
    x = np.array([[0.0, 2.0], [2.0, 0.0], [2.0, -2.0], [-2.0, 2.0], [0.5, 0.5]])
    edges = [(q, n) for q in (0, 1) for n in (2, 3, 4)]
    layer = GatLayer(Tensor(np.eye(2)[None]), Tensor(np.ones((1, 2))), Tensor(np.zeros(2)), 0.2)
    return x, edges, layer


# ---------------------------------------------------------------------------
# transformer


def transformer_block(x: Tensor, keep: np.ndarray, p: dict[str, Tensor], prefix: str,
                      cfg: ModelConfig, training: bool, rng, trace: dict | None = None) -> Tensor:
    B, L, d = x.shape
    H = cfg.n_attn_heads
    dk = d // H
    x2 = x.reshape(B * L, d)
    qkv = T.linear(x2, p[prefix + "qkv.W"], p[prefix + "qkv.b"])
    qkv = qkv.reshape(B, L, 3, H, dk).transpose(2, 0, 3, 1, 4)
    q, k, v = T.select(qkv, 0), T.select(qkv, 1), T.select(qkv, 2)
    scores = T.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(dk))
    attn = T.softmax_rows(scores, keep[:, None, None, :])
    if trace is not None:
        trace.setdefault("attn", []).append(attn.data.copy())
    attn = T.dropout(attn, cfg.attn_dropout, rng, training)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B * L, d)
    o = T.dropout(T.linear(ctx, p[prefix + "o.W"], p[prefix + "o.b"]), cfg.hidden_dropout, rng, training)
    x2 = T.layer_norm(x2 + o, p[prefix + "ln1.g"], p[prefix + "ln1.b"])
    f = T.gelu(T.linear(x2, p[prefix + "ffn1.W"], p[prefix + "ffn1.b"]))
    f = T.dropout(T.linear(f, p[prefix + "ffn2.W"], p[prefix + "ffn2.b"]), cfg.hidden_dropout, rng, training)
    x2 = T.layer_norm(x2 + f, p[prefix + "ln2.g"], p[prefix + "ln2.b"])
    return x2.reshape(B, L, d)


def encode_visit(batch: VisitBatch, cfg: ModelConfig, params: dict[str, Tensor],
                 training: bool = False, rng: np.random.Generator | None = None,
                 trace: dict | None = None) -> Tensor:
    ids = batch.token_ids
    if ids.ndim != 2 or ids.shape != batch.pad_mask.shape:
        raise T.ShapeMismatch("token_ids and pad_mask must both be [B, L]")
    if training and rng is None:
        raise ValueError("training mode needs a dropout rng")
    B, L = ids.shape
    x = T.embedding_lookup(params["embed"], ids)
    if cfg.uses_gat:
        flat, src, dst = batch.graph()
        h = T.take_rows(x.reshape(B * L, cfg.d_model), flat)
        h = gat_forward(h, (src, dst), gat_layer(params, cfg.leaky_slope), training, rng,
                        cfg.attn_dropout, cfg.gat_residual, trace)
        x = T.scatter_add_rows(h, flat, B * L).reshape(B, L, cfg.d_model)
    x = T.dropout(x, cfg.hidden_dropout, rng, training)
    keep = ~batch.pad_mask
    for i in range(cfg.n_transformer_blocks):
        x = transformer_block(x, keep, params, f"block{i}.", cfg, training, rng, trace)
    return x


def visit_embedding(hidden: Tensor, pad_mask: np.ndarray) -> Tensor:
    keep = ~np.asarray(pad_mask, dtype=bool)
    if not keep.any(axis=-1).all():
        raise EmptyVisit("every visit needs at least one non-PAD token")
    return T.mean_pool(hidden, keep)


def mlm_corrupt(token_ids: np.ndarray, pad_mask: np.ndarray, rng: np.random.Generator,
                vocab_size: int, select_p: float = 0.15, mask_p: float = 0.8,
                random_p: float = 0.1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Select non-special positions with prob ``select_p``; of those, 80% become
    MASK, 10% a uniform random non-special token, the rest stay."""
    ids = np.asarray(token_ids, dtype=np.int64)
    eligible = (ids >= N_SPECIAL) & ~np.asarray(pad_mask, dtype=bool)
    selected = (rng.random(ids.shape) < select_p) & eligible
    r = rng.random(ids.shape)
    randoms = rng.integers(N_SPECIAL, vocab_size, size=ids.shape)
    out = ids.copy()
    out[selected & (r < mask_p)] = MASK
    swap = selected & (r >= mask_p) & (r < mask_p + random_p)
    out[swap] = randoms[swap]
    return out, selected, ids.copy()


def mlm_logits(hidden: Tensor, params: dict[str, Tensor]) -> Tensor:
    B, L, d = hidden.shape
    W = params["mlm.W"]
    if W.shape[0] != d:
        raise T.ShapeMismatch(f"mlm head expects width {W.shape[0]}, got {d}")
    return T.linear(hidden.reshape(B * L, d), W, params["mlm.b"]).reshape(B, L, W.shape[1])


def task_logits(visit_emb: Tensor, params: dict[str, Tensor]) -> Tensor:
    W = params["task.W"]
    if visit_emb.ndim != 2 or visit_emb.shape[1] != W.shape[0]:
        raise T.ShapeMismatch(f"task head expects [B, {W.shape[0]}], got {visit_emb.shape}")
    return T.linear(visit_emb, W, params["task.b"])
