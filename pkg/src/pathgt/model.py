"""Four-stage pathway graph transformer.

Stage 1 conditions learned gene embeddings on each patient's mutation and
normalized copy-number values through a small MLP that emits per-gene scale
and shift (the scale kept strictly positive). Stage 2 pools member-gene
vectors into one token per pathway with additive attention. Stage 3 runs
edge-aware transformer blocks over the pathway graph, combining a soft
structural mask with a learned per-head bias derived from scalar edge
features. Stage 4 pools pathway tokens with a second attention network and
classifies.

Everything runs on the in-repo autodiff tape, so ``backward`` returns exact
gradients for every parameter. Evaluation helpers process fixed-size
zero-padded chunks: the BLAS kernels underneath are only bit-stable for a
fixed matrix shape, and fixed chunking makes eval logits independent of
batch composition at the bit level.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import serialize
from .autodiff import Tensor
from .cohort import NormStats
from .graphprior import PathwayPrior, SpectralEncoding, spectral_features

EVAL_CHUNK = 32
SCALE_FLOOR = 1e-3     # FiLM scale lower bound after softplus
EDGE_LOG_EPS = 1e-8    # inside the log of per-head edge gains
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
INIT_EMBED_SD = 0.02


class ModelError(ValueError):
    """Invalid model configuration or state."""


@dataclass
class ModelConfig:
    embed_dim: int = 64        # token width shared by genes and pathways
    film_hidden: int = 64      # hidden width of the conditioning MLP
    n_layers: int = 2
    n_heads: int = 4
    lpe_dims: int = 16         # spectral eigenvectors used for positions
    dropout: float = 0.2
    mask_mode: str = "soft"    # soft: penalize non-edges; full: no mask
    mask_penalty: float = -10.0

    def validate(self) -> None:
        if self.embed_dim % self.n_heads != 0:
            raise ModelError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.embed_dim % 2 != 0:
            raise ModelError("embed_dim must be even (readout uses a half-width projection)")
        if not (0.0 <= self.dropout < 1.0):
            raise ModelError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.mask_mode not in ("soft", "full"):
            raise ModelError(f"mask_mode must be soft or full, got {self.mask_mode!r}")
        if self.n_layers < 1 or self.lpe_dims < 1:
            raise ModelError("n_layers and lpe_dims must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ModelError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Batch:
    mut: np.ndarray  # (B, G) binary
    cnv: np.ndarray  # (B, G) fold-normalized copy number


@dataclass
class ModelState:
    config: ModelConfig
    n_genes: int
    n_pathways: int
    params: dict[str, np.ndarray]
    bn: dict[str, np.ndarray]  # running statistics per batch-norm site
    dtype: np.dtype = np.float32


@dataclass
class ForwardTrace:
    logits: Tensor                       # (B, 2)
    inputs: Tensor                       # (B, G, 2), gradient available after backward
    params: dict[str, Tensor]
    pathway_tokens: np.ndarray           # (B, P, d) pooled tokens before the transformer
    final_tokens: np.ndarray             # (B, P, d) tokens entering the readout
    pool_alpha: np.ndarray               # (B, M) member-gene weights, flat layout
    attention: list[np.ndarray]          # per layer (B, H, P, P)
    edge_features: list[np.ndarray]      # initial adjacency plus per-layer outputs
    readout_weights: np.ndarray          # (B, P)
    gene_repr: np.ndarray | None = None  # (B, G, d) if retained


# ---------------------------------------------------------------------------
# parameter table

_NORMAL, _ZEROS, _ONES, _FANIN = "normal", "zeros", "ones", "fanin"


def _param_table(config: ModelConfig, n_genes: int, n_pathways: int):
    """Every learnable tensor: (name, shape, init kind, fan-in, decayed).

    The listing order fixes the initialization draw order. Weight decay
    applies to projection matrices only; embeddings, the pathway bias
    table, per-head gains, vectors, and all biases are exempt.
    """
    d, dh = config.embed_dim, config.film_hidden
    G, P, H, k = n_genes, n_pathways, config.n_heads, config.lpe_dims
    table = [
        ("gene_embed", (G, d), _NORMAL, 0, False),
        ("film.w1", (2, dh), _FANIN, 2, True),
        ("film.b1", (dh,), _FANIN, 2, False),
        ("film.w2", (dh, 2 * d), _ZEROS, 0, True),
        ("film.b2", (2 * d,), _ZEROS, 0, False),
        ("pool.w", (d, d), _FANIN, d, True),
        ("pool.b", (d,), _FANIN, d, False),
        ("pool.u", (d,), _NORMAL, 0, False),
        ("pool.bp", (P, d), _ZEROS, 0, False),
        ("pe.w", (k + 1, d), _FANIN, k + 1, True),
        ("pe.b", (d,), _FANIN, k + 1, False),
    ]
    for i in range(config.n_layers):
        pre = f"layers.{i}"
        table += [
            (f"{pre}.attn.wq", (d, d), _FANIN, d, True),
            (f"{pre}.attn.wk", (d, d), _FANIN, d, True),
            (f"{pre}.attn.wv", (d, d), _FANIN, d, True),
            (f"{pre}.attn.wo", (d, d), _FANIN, d, True),
            (f"{pre}.edge_gain.w", (H,), _ZEROS, 0, False),
            (f"{pre}.edge_gain.b", (H,), _ZEROS, 0, False),
            (f"{pre}.ffn.w1", (d, 4 * d), _FANIN, d, True),
            (f"{pre}.ffn.b1", (4 * d,), _FANIN, d, False),
            (f"{pre}.ffn.w2", (4 * d, d), _FANIN, 4 * d, True),
            (f"{pre}.ffn.b2", (d,), _FANIN, 4 * d, False),
            (f"{pre}.bn1.gamma", (d,), _ONES, 0, False),
            (f"{pre}.bn1.beta", (d,), _ZEROS, 0, False),
            (f"{pre}.bn2.gamma", (d,), _ONES, 0, False),
            (f"{pre}.bn2.beta", (d,), _ZEROS, 0, False),
            (f"{pre}.edge_mlp.w1", (1, dh), _FANIN, 1, True),
            (f"{pre}.edge_mlp.b1", (dh,), _FANIN, 1, False),
            (f"{pre}.edge_mlp.w2", (dh, 1), _FANIN, dh, True),
            (f"{pre}.edge_mlp.b2", (1,), _FANIN, dh, False),
            (f"{pre}.edge_bn.gamma", (1,), _ONES, 0, False),
            (f"{pre}.edge_bn.beta", (1,), _ZEROS, 0, False),
        ]
    table += [
        ("readout.w_attn", (d, d // 2), _FANIN, d, True),
        ("readout.v", (d // 2,), _NORMAL, 0, False),
        ("head.w_cls", (d, d), _FANIN, d, True),
        ("head.b_cls", (d,), _FANIN, d, False),
        ("head.bn.gamma", (d,), _ONES, 0, False),
        ("head.bn.beta", (d,), _ZEROS, 0, False),
        ("head.w_out", (d, 2), _FANIN, d, True),
        ("head.b_out", (2,), _FANIN, d, False),
    ]
    return table


def _bn_sites(config: ModelConfig) -> list[tuple[str, int]]:
    sites = []
    for i in range(config.n_layers):
        sites += [(f"layers.{i}.bn1", config.embed_dim),
                  (f"layers.{i}.bn2", config.embed_dim),
                  (f"layers.{i}.edge_bn", 1)]
    sites.append(("head.bn", config.embed_dim))
    return sites


def init_state(config: ModelConfig, n_genes: int, n_pathways: int, seed: int,
               dtype=np.float32, enc: SpectralEncoding | None = None) -> ModelState:
    """Fresh parameters with the documented per-tensor initialization.

    Passing ``enc`` registers the positional projection with the encoding,
    so ``graphprior.positional_features`` reads the live (trained) values.
    """
    config.validate()
    if enc is not None:
        if enc.n_pathways != n_pathways:
            raise ModelError(f"encoding covers {enc.n_pathways} pathways, model expects {n_pathways}")
        if enc.k != config.lpe_dims:
            raise ModelError(f"encoding has k={enc.k}, config.lpe_dims={config.lpe_dims}")
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape, kind, fan, _decay in _param_table(config, n_genes, n_pathways):
        if kind == _NORMAL:
            arr = rng.normal(0.0, INIT_EMBED_SD, size=shape)
        elif kind == _ZEROS:
            arr = np.zeros(shape)
        elif kind == _ONES:
            arr = np.ones(shape)
        else:
            bound = 1.0 / np.sqrt(fan)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = arr.astype(dtype)
    bn = {}
    for site, width in _bn_sites(config):
        bn[f"{site}.mean"] = np.zeros(width, dtype=dtype)
        bn[f"{site}.var"] = np.ones(width, dtype=dtype)
    state = ModelState(config=config, n_genes=n_genes, n_pathways=n_pathways,
                       params=params, bn=bn, dtype=np.dtype(dtype))
    if enc is not None:
        enc.proj_w = state.params["pe.w"]
        enc.proj_b = state.params["pe.b"]
    return state


def decayed_params(config: ModelConfig, n_genes: int, n_pathways: int) -> set[str]:
    return {name for name, _s, _k, _f, decay in _param_table(config, n_genes, n_pathways) if decay}


def count_params(config: ModelConfig, n_genes: int, n_pathways: int) -> int:
    """Exact learnable-parameter count by enumerating the tensor table."""
    return sum(int(np.prod(shape)) for _n, shape, _k, _f, _d in _param_table(config, n_genes, n_pathways))


def closed_form_param_count(config: ModelConfig, n_genes: int, n_pathways: int) -> int:
    """Coarse closed-form count; excludes a few small tensors by design.

    Kept for reporting next to the enumerated count, which is authoritative.
    """
    d, dh, L, H = config.embed_dim, config.film_hidden, config.n_layers, config.n_heads
    G, P = n_genes, n_pathways
    return int(G * d + 2 * (2 * dh + dh * 2 * d) + (d * d + P * d + d)
               + L * (12 * d * d + 8 * d + H + 3)
               + (d * d // 2 + 3 * d // 2 + d * d + d + 2 * d + 2))


def param_count_report(config: ModelConfig, n_genes: int, n_pathways: int) -> dict:
    return {
        "enumerated": count_params(config, n_genes, n_pathways),
        "closed_form": closed_form_param_count(config, n_genes, n_pathways),
    }


# ---------------------------------------------------------------------------
# tape ops specific to the model


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, bn: dict, site: str,
               training: bool) -> Tensor:
    """Batch normalization over rows with running-statistic tracking.

    Training batches of one row fall back to running statistics (and leave
    them untouched), so singleton batches stay finite. Normalization uses
    the biased variance; the running update stores the unbiased one.
    """
    rm, rv = bn[site + ".mean"], bn[site + ".var"]
    n = x.data.shape[0]
    if training and n > 1:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        rm[...] = (1.0 - BN_MOMENTUM) * rm + BN_MOMENTUM * mu
        rv[...] = (1.0 - BN_MOMENTUM) * rv + BN_MOMENTUM * (var * (n / (n - 1.0)))
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x.data - mu) * inv
        out = gamma.data * xhat + beta.data

        def bw(g):
            dxhat = g * gamma.data
            dx = (inv / n) * (n * dxhat - dxhat.sum(axis=0)
                              - xhat * (dxhat * xhat).sum(axis=0))
            return (dx, (g * xhat).sum(axis=0), g.sum(axis=0))

        return ad.custom(out, (x, gamma, beta), bw)

    mu = rm.copy()
    inv = 1.0 / np.sqrt(rv + BN_EPS)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def bw(g):
        return (g * (gamma.data * inv), (g * xhat).sum(axis=0), g.sum(axis=0))

    return ad.custom(out, (x, gamma, beta), bw)


def gather_members(h: Tensor, prior: PathwayPrior) -> Tensor:
    """(B, G, d) -> (B, M, d): one row per (pathway, gene) membership pair."""
    data = h.data[:, prior.member_gene, :]

    def bw(g):
        regrouped = g[:, prior.scatter_order, :]
        sums = np.add.reduceat(regrouped, prior.scatter_start, axis=1)
        out = np.zeros_like(h.data)
        out[:, prior.scatter_gene, :] = sums
        return (out,)

    return ad.custom(data, (h,), bw)


def member_bias(bp: Tensor, prior: PathwayPrior) -> Tensor:
    """(P, d) pathway bias expanded to the (M, d) membership layout."""
    data = bp.data[prior.member_path]

    def bw(g):
        return (np.add.reduceat(g, prior.path_start, axis=0),)

    return ad.custom(data, (bp,), bw)


def segment_softmax(scores: Tensor, prior: PathwayPrior) -> Tensor:
    """Softmax within each pathway's membership segment of a (B, M) array."""
    starts, lens = prior.path_start, prior.path_len
    shifted = scores.data - np.repeat(
        np.maximum.reduceat(scores.data, starts, axis=1), lens, axis=1)
    e = np.exp(shifted)
    alpha = e / np.repeat(np.add.reduceat(e, starts, axis=1), lens, axis=1)

    def bw(g):
        dot = np.add.reduceat(alpha * g, starts, axis=1)
        return (alpha * (g - np.repeat(dot, lens, axis=1)),)

    return ad.custom(alpha, (scores,), bw)


def segment_sum_members(x: Tensor, prior: PathwayPrior) -> Tensor:
    """(B, M, d) -> (B, P, d): sum each pathway's membership segment."""
    data = np.add.reduceat(x.data, prior.path_start, axis=1)

    def bw(g):
        return (np.repeat(g, prior.path_len, axis=1),)

    return ad.custom(data, (x,), bw)


def structural_mask(prior: PathwayPrior, config: ModelConfig, dtype) -> np.ndarray:
    """Additive attention penalty: 0 on edges and the diagonal, else the
    configured penalty. Full mode disables the mask entirely."""
    P = prior.n_pathways
    if config.mask_mode == "full":
        return np.zeros((P, P), dtype=dtype)
    connected = (prior.adjacency > 0) | np.eye(P, dtype=bool)
    return np.where(connected, 0.0, config.mask_penalty).astype(dtype)


def dense_alpha(prior: PathwayPrior, alpha_flat: np.ndarray) -> np.ndarray:
    """Expand flat member weights to dense (..., P, G) with exact zeros
    outside membership."""
    lead = alpha_flat.shape[:-1]
    out = np.zeros(lead + (prior.n_pathways, prior.n_genes), dtype=alpha_flat.dtype)
    out[..., prior.member_path, prior.member_gene] = alpha_flat
    return out


# ---------------------------------------------------------------------------
# stages


def _wrap_params(state: ModelState) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True) for k, v in state.params.items()}


def _film(pt: dict[str, Tensor], x: Tensor, d: int) -> Tensor:
    B, G, _ = x.shape
    flat = ad.reshape(x, (B * G, 2))
    hidden = ad.gelu(ad.add(ad.matmul(flat, pt["film.w1"]), pt["film.b1"]))
    mod = ad.add(ad.matmul(hidden, pt["film.w2"]), pt["film.b2"])
    mod = ad.reshape(mod, (B, G, 2 * d))
    scale = ad.add(ad.softplus(mod[:, :, :d]), SCALE_FLOOR)
    shift = mod[:, :, d:]
    return ad.add(ad.mul(scale, pt["gene_embed"]), shift)


def _pool(pt: dict[str, Tensor], h: Tensor, prior: PathwayPrior, d: int):
    B = h.shape[0]
    members = gather_members(h, prior)  # (B, M, d)
    bias = member_bias(pt["pool.bp"], prior)
    pre = ad.tanh(ad.add(ad.add(ad.matmul(members, pt["pool.w"]), pt["pool.b"]), bias))
    scores = ad.reshape(ad.matmul(pre, ad.reshape(pt["pool.u"], (d, 1))),
                        (B, prior.n_members))
    alpha = segment_softmax(scores, prior)
    tokens = segment_sum_members(ad.mul(members, ad.reshape(alpha, (B, prior.n_members, 1))), prior)
    return tokens, alpha


def _positional(pt: dict[str, Tensor], enc: SpectralEncoding, dtype,
                training: bool, rng) -> Tensor:
    feats = spectral_features(enc, training=training, rng=rng).astype(dtype)
    return ad.add(ad.matmul(ad.as_tensor(feats), pt["pe.w"]), pt["pe.b"])


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, P, d = x.shape
    return ad.swapaxes(ad.reshape(x, (B, P, n_heads, d // n_heads)), 1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    B, H, P, dh = x.shape
    return ad.reshape(ad.swapaxes(x, 1, 2), (B, P, H * dh))


def _bn_tokens(x: Tensor, pt, bn, site: str, training: bool) -> Tensor:
    B, P, d = x.shape
    flat = ad.reshape(x, (B * P, d))
    out = batch_norm(flat, pt[site + ".gamma"], pt[site + ".beta"], bn, site, training)
    return ad.reshape(out, (B, P, d))


def _block(pt: dict[str, Tensor], bn: dict, config: ModelConfig, layer: int,
           x: Tensor, edges: Tensor, m_struct: np.ndarray,
           training: bool, rng):
    B, P, d = x.shape
    H = config.n_heads
    pre = f"layers.{layer}"

    gains = ad.softplus(ad.add(ad.mul(ad.reshape(edges, (P, P, 1)),
                                      pt[f"{pre}.edge_gain.w"]),
                               pt[f"{pre}.edge_gain.b"]))
    edge_bias = ad.tmean(ad.log(ad.add(gains, EDGE_LOG_EPS)), axis=-1)  # (P, P)
    attn_bias = ad.add(edge_bias, ad.as_tensor(m_struct))

    q = _split_heads(ad.matmul(x, pt[f"{pre}.attn.wq"]), H)
    k = _split_heads(ad.matmul(x, pt[f"{pre}.attn.wk"]), H)
    v = _split_heads(ad.matmul(x, pt[f"{pre}.attn.wv"]), H)
    scale = np.asarray(1.0 / np.sqrt(d // H), dtype=x.dtype)
    logits = ad.add(ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), scale),
                    ad.reshape(attn_bias, (1, 1, P, P)))
    if not np.isfinite(logits.data).all():
        raise ModelError(f"transformer layer {layer}: non-finite attention logits")
    attn = ad.softmax(logits, axis=-1)  # (B, H, P, P)
    mixed = ad.matmul(_merge_heads(ad.matmul(attn, v)), pt[f"{pre}.attn.wo"])
    x = _bn_tokens(ad.add(x, mixed), pt, bn, f"{pre}.bn1", training)

    hidden = ad.gelu(ad.add(ad.matmul(x, pt[f"{pre}.ffn.w1"]), pt[f"{pre}.ffn.b1"]))
    if training:
        hidden = ad.dropout(hidden, config.dropout, rng)
    ffn_out = ad.add(ad.matmul(hidden, pt[f"{pre}.ffn.w2"]), pt[f"{pre}.ffn.b2"])
    if training:
        ffn_out = ad.dropout(ffn_out, config.dropout, rng)
    x = _bn_tokens(ad.add(x, ffn_out), pt, bn, f"{pre}.bn2", training)

    flat_e = ad.reshape(edges, (P * P, 1))
    eh = ad.gelu(ad.add(ad.matmul(flat_e, pt[f"{pre}.edge_mlp.w1"]), pt[f"{pre}.edge_mlp.b1"]))
    eo = ad.add(ad.matmul(eh, pt[f"{pre}.edge_mlp.w2"]), pt[f"{pre}.edge_mlp.b2"])
    eo = batch_norm(eo, pt[f"{pre}.edge_bn.gamma"], pt[f"{pre}.edge_bn.beta"],
                    bn, f"{pre}.edge_bn", training)
    new_edges = ad.reshape(eo, (P, P))
    return x, new_edges, attn


def _readout(pt: dict[str, Tensor], x: Tensor, d: int):
    B, P, _ = x.shape
    keys = ad.tanh(ad.matmul(x, pt["readout.w_attn"]))
    scores = ad.reshape(ad.matmul(keys, ad.reshape(pt["readout.v"], (d // 2, 1))), (B, P))
    weights = ad.softmax(scores, axis=-1)
    pooled = ad.tsum(ad.mul(x, ad.reshape(weights, (B, P, 1))), axis=1)
    return pooled, weights


def _head(pt: dict[str, Tensor], bn: dict, config: ModelConfig, pooled: Tensor,
          training: bool, rng) -> Tensor:
    h = ad.add(ad.matmul(pooled, pt["head.w_cls"]), pt["head.b_cls"])
    h = batch_norm(h, pt["head.bn.gamma"], pt["head.bn.beta"], bn, "head.bn", training)
    h = ad.gelu(h)
    if training:
        h = ad.dropout(h, config.dropout, rng)
    return ad.add(ad.matmul(h, pt["head.w_out"]), pt["head.b_out"])


def forward(state: ModelState, batch: Batch, prior: PathwayPrior,
            enc: SpectralEncoding, training: bool = False,
            rng: np.random.Generator | None = None,
            retain_gene_repr: bool = False) -> ForwardTrace:
    """Full forward pass; the returned trace supports ``backward``.

    Training mode needs an rng: it drives the eigenvector sign flips and
    dropout, in that order. Eval mode is fully deterministic.
    """
    config = state.config
    d = config.embed_dim
    mut = np.asarray(batch.mut, dtype=state.dtype)
    cnv = np.asarray(batch.cnv, dtype=state.dtype)
    if mut.ndim != 2 or mut.shape != cnv.shape:
        raise ModelError(f"batch matrices must share shape, got {mut.shape} and {cnv.shape}")
    if mut.shape[0] == 0:
        raise ModelError("empty batch")
    if mut.shape[1] != state.n_genes:
        raise ModelError(f"batch has {mut.shape[1]} genes, model expects {state.n_genes}")
    if prior.n_pathways != state.n_pathways:
        raise ModelError(f"prior has {prior.n_pathways} pathways, model expects {state.n_pathways}")
    if enc.k != config.lpe_dims or enc.n_pathways != prior.n_pathways:
        raise ModelError("spectral encoding does not match the model configuration")
    if training and rng is None:
        raise ModelError("training-mode forward needs an rng")

    pt = _wrap_params(state)
    inputs = Tensor(np.stack([mut, cnv], axis=-1), requires_grad=True)  # (B, G, 2)

    gene_repr = _film(pt, inputs, d)
    tokens, alpha = _pool(pt, gene_repr, prior, d)
    pe = _positional(pt, enc, state.dtype, training, rng)
    x = ad.add(tokens, pe)

    m_struct = structural_mask(prior, config, state.dtype)
    edges = ad.as_tensor(prior.adjacency.astype(state.dtype))
    attn_stack: list[np.ndarray] = []
    edge_stack: list[np.ndarray] = [edges.data.copy()]
    for layer in range(config.n_layers):
        x, edges, attn = _block(pt, state.bn, config, layer, x, edges, m_struct, training, rng)
        attn_stack.append(attn.data)
        edge_stack.append(edges.data)

    pooled, weights = _readout(pt, x, d)
    logits = _head(pt, state.bn, config, pooled, training, rng)

    return ForwardTrace(
        logits=logits,
        inputs=inputs,
        params=pt,
        pathway_tokens=tokens.data,
        final_tokens=x.data,
        pool_alpha=alpha.data,
        attention=attn_stack,
        edge_features=edge_stack,
        readout_weights=weights.data,
        gene_repr=gene_repr.data if retain_gene_repr else None,
    )


def backward(state: ModelState, trace: ForwardTrace,
             dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Reverse-mode gradients for every parameter given d(loss)/d(logits).

    Parameters untouched by the loss (or given a zero upstream gradient)
    come back as zeros. The input-coordinate gradient lands on
    ``trace.inputs.grad`` as a side effect, for attribution methods.
    """
    if trace is None:
        raise ModelError("backward requires a forward trace")
    seed = np.asarray(dlogits, dtype=trace.logits.dtype)
    ad.backward(trace.logits, seed=seed)
    grads = {}
    for name, tensor in trace.params.items():
        grads[name] = tensor.grad if tensor.grad is not None else np.zeros_like(state.params[name])
    return grads


# ---------------------------------------------------------------------------
# single-sample stage surfaces


def film_modulate(state: ModelState, mut_row: np.ndarray, cnv_row: np.ndarray,
                  training: bool = False) -> np.ndarray:
    """Conditioned gene representations (G, d) for one patient row.

    The stage has no stochastic elements, so ``training`` does not change
    the output.
    """
    del training
    mut_row = np.asarray(mut_row, dtype=state.dtype).reshape(1, -1)
    cnv_row = np.asarray(cnv_row, dtype=state.dtype).reshape(1, -1)
    if mut_row.shape[1] != state.n_genes:
        raise ModelError(f"row has {mut_row.shape[1]} genes, model expects {state.n_genes}")
    pt = _wrap_params(state)
    x = ad.as_tensor(np.stack([mut_row, cnv_row], axis=-1))
    return _film(pt, x, state.config.embed_dim).data[0]


def pool_pathways(state: ModelState, gene_repr: np.ndarray,
                  prior: PathwayPrior) -> tuple[np.ndarray, np.ndarray]:
    """Pathway tokens (P, d) and dense member weights (P, G) for one sample."""
    if any(len(m) == 0 for m in prior.memberships):
        raise ModelError("pathway with empty membership")
    pt = _wrap_params(state)
    h = ad.as_tensor(np.asarray(gene_repr, dtype=state.dtype)[None])
    tokens, alpha = _pool(pt, h, prior, state.config.embed_dim)
    return tokens.data[0], dense_alpha(prior, alpha.data)[0]


def transformer_block(state: ModelState, layer: int, tokens: np.ndarray,
                      edges: np.ndarray, prior: PathwayPrior,
                      training: bool = False,
                      rng: np.random.Generator | None = None):
    """One edge-aware block: (tokens', edges', attention).

    Operates on a (B, P, d) token stack; updates running batch-norm
    statistics when ``training`` is set.
    """
    if training and rng is None:
        raise ModelError("training-mode block needs an rng for dropout")
    pt = _wrap_params(state)
    m_struct = structural_mask(prior, state.config, state.dtype)
    x, e, attn = _block(pt, state.bn, state.config, layer,
                        ad.as_tensor(np.asarray(tokens, dtype=state.dtype)),
                        ad.as_tensor(np.asarray(edges, dtype=state.dtype)),
                        m_struct, training, rng)
    return x.data, e.data, attn.data


def readout_classify(state: ModelState, tokens: np.ndarray, training: bool = False,
                     rng: np.random.Generator | None = None):
    """Readout over pathway tokens: (logits (B, 2), weights (B, P))."""
    if training and rng is None:
        raise ModelError("training-mode readout needs an rng for dropout")
    pt = _wrap_params(state)
    pooled, weights = _readout(pt, ad.as_tensor(np.asarray(tokens, dtype=state.dtype)),
                               state.config.embed_dim)
    logits = _head(pt, state.bn, state.config, pooled, training, rng)
    return logits.data, weights.data


# ---------------------------------------------------------------------------
# fixed-shape evaluation


def iter_eval_chunks(state: ModelState, mut: np.ndarray, cnv: np.ndarray,
                     prior: PathwayPrior, enc: SpectralEncoding,
                     chunk_size: int = EVAL_CHUNK, retain_gene_repr: bool = False):
    """Yield (trace, valid_rows) over zero-padded fixed-size chunks.

    Every chunk has exactly ``chunk_size`` rows, so each sample's logits
    are bit-identical however the caller groups samples.
    """
    mut = np.asarray(mut, dtype=state.dtype)
    cnv = np.asarray(cnv, dtype=state.dtype)
    n, G = mut.shape
    for start in range(0, n, chunk_size):
        count = min(chunk_size, n - start)
        block_m = np.zeros((chunk_size, G), dtype=state.dtype)
        block_c = np.zeros((chunk_size, G), dtype=state.dtype)
        block_m[:count] = mut[start:start + count]
        block_c[:count] = cnv[start:start + count]
        trace = forward(state, Batch(block_m, block_c), prior, enc,
                        training=False, retain_gene_repr=retain_gene_repr)
        yield trace, count


def eval_logits(state: ModelState, mut: np.ndarray, cnv: np.ndarray,
                prior: PathwayPrior, enc: SpectralEncoding) -> np.ndarray:
    """Deterministic eval-mode logits (n, 2), independent of batching."""
    if np.asarray(mut).shape[0] == 0:
        return np.zeros((0, 2), dtype=state.dtype)
    blocks = [trace.logits.data[:count]
              for trace, count in iter_eval_chunks(state, mut, cnv, prior, enc)]
    return np.concatenate(blocks, axis=0)


def eval_scores(state: ModelState, mut: np.ndarray, cnv: np.ndarray,
                prior: PathwayPrior, enc: SpectralEncoding) -> np.ndarray:
    """Probability of class 1 per sample."""
    logits = eval_logits(state, mut, cnv, prior, enc).astype(np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e[:, 1] / e.sum(axis=1)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Self-contained trained model snapshot.

    Carries parameters, batch-norm running statistics, optimizer moments,
    the fold's normalization statistics, and free-form metadata (fold,
    seed, input modality).
    """

    config: ModelConfig
    n_genes: int
    n_pathways: int
    params: dict[str, np.ndarray]
    bn: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    step: int
    norm_stats: NormStats | None
    meta: dict = field(default_factory=dict)


def state_from_checkpoint(ckpt: Checkpoint) -> ModelState:
    return ModelState(
        config=ckpt.config,
        n_genes=ckpt.n_genes,
        n_pathways=ckpt.n_pathways,
        params={k: v.copy() for k, v in ckpt.params.items()},
        bn={k: v.copy() for k, v in ckpt.bn.items()},
        dtype=np.dtype(np.float32),
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors: dict[str, np.ndarray] = {}
    for k, v in ckpt.params.items():
        tensors["param." + k] = v.astype(np.float32)
    for k, v in ckpt.bn.items():
        tensors["bn." + k] = v.astype(np.float32)
    for k, v in ckpt.opt_m.items():
        tensors["opt_m." + k] = v.astype(np.float32)
    for k, v in ckpt.opt_v.items():
        tensors["opt_v." + k] = v.astype(np.float32)
    meta = {
        "config": ckpt.config.to_dict(),
        "n_genes": ckpt.n_genes,
        "n_pathways": ckpt.n_pathways,
        "step": ckpt.step,
        "extra": ckpt.meta,
    }
    if ckpt.norm_stats is not None:
        tensors["norm.mean"] = ckpt.norm_stats.mean.astype(np.float32)
        tensors["norm.std"] = ckpt.norm_stats.std.astype(np.float32)
        meta["norm"] = {
            "eps": ckpt.norm_stats.eps,
            "gene_ids": ckpt.norm_stats.gene_ids,
            "source_fold": ckpt.norm_stats.source_fold,
        }
    serialize.save_tensors(path, tensors, meta=meta)


def load_checkpoint(path) -> Checkpoint:
    tensors, meta = serialize.load_tensors(path)
    params, bn, opt_m, opt_v = {}, {}, {}, {}
    for name, arr in tensors.items():
        kind, _, rest = name.partition(".")
        if kind == "param":
            params[rest] = arr
        elif kind == "bn":
            bn[rest] = arr
        elif kind == "opt_m":
            opt_m[rest] = arr
        elif kind == "opt_v":
            opt_v[rest] = arr
    norm = None
    if "norm" in meta:
        norm = NormStats(
            mean=tensors["norm.mean"].astype(np.float64),
            std=tensors["norm.std"].astype(np.float64),
            eps=float(meta["norm"]["eps"]),
            gene_ids=list(meta["norm"]["gene_ids"]),
            source_fold=int(meta["norm"]["source_fold"]),
        )
    return Checkpoint(
        config=ModelConfig.from_dict(meta["config"]),
        n_genes=int(meta["n_genes"]),
        n_pathways=int(meta["n_pathways"]),
        params=params,
        bn=bn,
        opt_m=opt_m,
        opt_v=opt_v,
        step=int(meta["step"]),
        norm_stats=norm,
        meta=dict(meta.get("extra", {})),
    )
