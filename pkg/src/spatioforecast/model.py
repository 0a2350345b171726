"""Forecasting model family: Trans, Trans+GCN, Trans+Adp, Trans+GCN+Adp, DLinear.

All variants share the encoder-decoder skeleton: channel embedding plus
sinusoidal positional encoding, L encoder blocks, then a linear decoder that
projects the temporal axis T -> F and the feature axis D -> C. Blocks differ
in their second sublayer: the plain transformer runs a feed-forward path,
the GCN variants run K-hop graph propagation over a geographic and/or a
generated adjacency, fused by a linear map, with the residual update
ReLU(h) + Z_t. Generated adjacencies come from node-level attention over the
block input, sparsified by the rule in :mod:`spatioforecast.graph`.

The residual convention used everywhere is Z <- x + layer_norm(sublayer(x)).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import graph
from . import numcore as nc
from .numcore import Tensor

VARIANTS = ("Trans", "TransGCN", "TransAdp", "TransGCNAdp", "DLinear")
FFN_MULT = 4


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    n_regions: int
    T: int
    F: int
    C: int
    D: int = 8
    heads: int = 4
    L: int = 2
    K: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.D % self.heads:
            raise ValueError(f"D={self.D} must be divisible by heads={self.heads}")
        if self.D % 2:
            raise ValueError(f"D={self.D} must be even for positional encoding")
        if self.K < 0 or self.L < 1:
            raise ValueError("need K >= 0 and L >= 1")
        for name in ("n_regions", "T", "F", "C"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def D_k(self) -> int:
        return self.D // self.heads

    @property
    def D_v(self) -> int:
        return self.D // self.heads

    @property
    def D_o(self) -> int:
        # multi-task head: predict every input channel
        return self.C

    @property
    def uses_geo(self) -> bool:
        return self.variant in ("TransGCN", "TransGCNAdp")

    @property
    def uses_adp(self) -> bool:
        return self.variant in ("TransAdp", "TransGCNAdp")

    @property
    def n_streams(self) -> int:
        return int(self.uses_geo) + int(self.uses_adp)


def positional_encoding(T: int, D: int) -> np.ndarray:
    """Sinusoidal table P[i, 2j] = sin(i / 10000^(2j/D)), P[i, 2j+1] = cos(...)."""
    if D % 2:
        raise ValueError(f"positional encoding needs an even dimension, got {D}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    j2 = np.arange(0, D, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, j2 / D)
    p = np.empty((T, D), dtype=np.float64)
    p[:, 0::2] = np.sin(angle)
    p[:, 1::2] = np.cos(angle)
    return p


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape inventory; a pure function of the config."""
    if config.variant == "DLinear":
        n, c, t, f = config.n_regions, config.C, config.T, config.F
        return {"dlinear.W": (n, c, t, f), "dlinear.b": (n, c, f)}
    d, t = config.D, config.T
    shapes: dict[str, tuple[int, ...]] = {
        "embed.W": (config.C, d),
        "embed.b": (d,),
    }
    for l in range(config.L):
        p = f"block{l}"
        shapes[f"{p}.attn.Wq"] = (d, d)
        shapes[f"{p}.attn.Wk"] = (d, d)
        shapes[f"{p}.attn.Wv"] = (d, d)
        shapes[f"{p}.attn.Wp"] = (d, d)
        shapes[f"{p}.norm_attn.gamma"] = (d,)
        shapes[f"{p}.norm_attn.beta"] = (d,)
        if config.variant == "Trans":
            shapes[f"{p}.ffn.W1"] = (d, FFN_MULT * d)
            shapes[f"{p}.ffn.b1"] = (FFN_MULT * d,)
            shapes[f"{p}.ffn.W2"] = (FFN_MULT * d, d)
            shapes[f"{p}.ffn.b2"] = (d,)
            shapes[f"{p}.norm_ffn.gamma"] = (d,)
            shapes[f"{p}.norm_ffn.beta"] = (d,)
        else:
            if config.uses_adp:
                shapes[f"{p}.node_attn.Wq"] = (t * d, config.D_k)
                shapes[f"{p}.node_attn.Wk"] = (t * d, config.D_k)
            if config.uses_geo:
                for k in range(config.K + 1):
                    shapes[f"{p}.gcn.geo.theta{k}"] = (d, d)
            if config.uses_adp:
                for k in range(config.K + 1):
                    shapes[f"{p}.gcn.adp.theta{k}"] = (d, d)
            shapes[f"{p}.fuse.Wx"] = (config.n_streams * d, d)
    shapes["decoder.Wo"] = (t, config.F)
    shapes["decoder.Wg"] = (d, config.D_o)
    return shapes


def init_params(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Uniform fan-in initialization; deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 1:
            arr = np.ones(shape) if name.endswith(".gamma") else np.zeros(shape)
        else:
            fan_in = shape[-2]
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = nc.tensor(arr, requires_grad=True)
    return params


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    out = {}
    for name, t in params.items():
        out[name] = nc.tensor(t.data.copy(), requires_grad=t.requires_grad)
    return out


# ---------------------------------------------------------------------------
# building blocks (tape-aware)
# ---------------------------------------------------------------------------

def _split_heads(t: Tensor, heads: int) -> Tensor:
    *lead, T, D = t.shape
    nl = len(lead)
    r = nc.reshape(t, (*lead, T, heads, D // heads))
    perm = (*range(nl), nl + 1, nl, nl + 2)
    return nc.transpose(r, perm)


def _merge_heads(t: Tensor) -> Tensor:
    *lead, h, T, dv = t.shape
    nl = len(lead)
    perm = (*range(nl), nl + 1, nl, nl + 2)
    return nc.reshape(nc.transpose(t, perm), (*lead, T, h * dv))


def _swap_last2(t: Tensor) -> Tensor:
    nd = t.ndim
    perm = (*range(nd - 2), nd - 1, nd - 2)
    return nc.transpose(t, perm)


def temporal_attention(z: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                       wp: Tensor, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention along the temporal axis.

    Per head: softmax(Q K^T / sqrt(D_k)) V; heads are concatenated and
    projected back to D. No residual or normalization here.
    """
    d_k = wq.shape[1] // heads
    q = _split_heads(nc.matmul(z, wq), heads)
    k = _split_heads(nc.matmul(z, wk), heads)
    v = _split_heads(nc.matmul(z, wv), heads)
    scores = nc.scale(nc.matmul(q, _swap_last2(k)), 1.0 / math.sqrt(d_k))
    att = nc.softmax_rows(scores)
    return nc.matmul(_merge_heads(nc.matmul(att, v)), wp)


def node_attention(z: Tensor, wq: Tensor, wk: Tensor) -> Tensor:
    """Node attention score over the spatial axis (rows sum to one).

    The temporal axis of the block input is flattened into features before
    the D_k projection; single-head by construction.
    """
    *lead, n, T, d = z.shape
    flat = nc.reshape(z, (*lead, n, T * d))
    q = nc.matmul(flat, wq)
    k = nc.matmul(flat, wk)
    scores = nc.scale(nc.matmul(q, _swap_last2(k)), 1.0 / math.sqrt(wq.shape[1]))
    return nc.softmax_rows(scores)


def normalize_sym_t(a: Tensor) -> Tensor:
    """Differentiable D^(-1/2) A D^(-1/2); zero-degree rows map to zero rows."""
    deg = nc.sum_axis(a, -1)                       # (..., N)
    dis = nc.deg_inv_sqrt(deg)
    row = nc.reshape(dis, (*dis.shape, 1))
    col = nc.reshape(dis, (*dis.shape[:-1], 1, dis.shape[-1]))
    return nc.mul(nc.mul(a, row), col)


def gcn_propagate(a_norm: Tensor | np.ndarray, z_t: Tensor, thetas: list[Tensor]) -> Tensor:
    """K-hop propagation: sum_k A^k Z_t Theta_k with A^0 = I, A on the node axis."""
    if not isinstance(a_norm, Tensor):
        a_norm = nc.constant(a_norm)
    *lead, n, T, d = z_t.shape
    h = nc.matmul(z_t, thetas[0])
    cur = nc.reshape(z_t, (*lead, n, T * d))
    for theta in thetas[1:]:
        cur = nc.matmul(a_norm, cur)
        h = nc.add(h, nc.matmul(nc.reshape(cur, (*lead, n, T, d)), theta))
    return h


def dual_fuse(h_geo: Tensor | None, h_adp: Tensor | None, wx: Tensor) -> Tensor:
    """Fuse the adjacency streams through W_x; single-stream maps pass alone."""
    if h_geo is not None and h_adp is not None:
        return nc.matmul(nc.concat_last(h_geo, h_adp), wx)
    lone = h_geo if h_geo is not None else h_adp
    if lone is None:
        raise ValueError("dual_fuse needs at least one stream")
    return nc.matmul(lone, wx)


def block_update(h: Tensor, z_t: Tensor) -> Tensor:
    """Residual update after graph propagation: ReLU(h) + Z_t."""
    return nc.add(nc.relu(h), z_t)


def _generated_adjacency(m_n: Tensor, geo: graph.GeoAdjacency | None,
                         options: graph.AdjacencyOptions, rho_default: float,
                         literal_rho: bool) -> Tensor:
    """Differentiable mirror of graph.sparsify for a batch of attention maps.

    The branch of the sparsity rule is decided per sample from the forward
    values (same rule as graph.sparsify_decision); gradients flow through
    kept entries, the symmetrization, and the off-diagonal of set_diag.
    """
    b, n, _ = m_n.shape
    tau = options.threshold if options.threshold is not None else 1.0 / n
    sel = np.zeros((b, 1, 1))
    for i in range(b):
        _, _, use = graph.sparsify_decision(
            m_n.data[i], geo, rho_default=rho_default,
            tau=options.threshold, literal_rho=literal_rho)
        sel[i] = 1.0 if (options.truncate and use) else 0.0
    a = nc.add(nc.mul(nc.threshold_keep(m_n, tau), nc.constant(sel)),
               nc.mul(m_n, nc.constant(1.0 - sel)))
    if options.undirected:
        a = nc.scale(nc.add(a, nc.transpose(a, (0, 2, 1))), 0.5)
    if options.set_diag:
        eye = np.eye(n)
        a = nc.add(nc.mul(a, nc.constant(1.0 - eye)), nc.constant(np.broadcast_to(eye, (b, n, n)).copy()))
    return a


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _ffn(z: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    hidden = nc.relu(nc.linear(z, params[f"{prefix}.ffn.W1"], params[f"{prefix}.ffn.b1"]))
    return nc.linear(hidden, params[f"{prefix}.ffn.W2"], params[f"{prefix}.ffn.b2"])


def forward_batch(config: ModelConfig, params: dict[str, Tensor], x,
                  geo: graph.GeoAdjacency | None = None, *,
                  adjacency_options: graph.AdjacencyOptions | None = None,
                  rho_default: float = 0.001,
                  generated_override: np.ndarray | None = None,
                  literal_rho: bool = False) -> tuple[Tensor, list[np.ndarray]]:
    """Run a batch (B, N, T, C) -> ((B, N, F, C), generated-map snapshots).

    Snapshots are one (B, N, N) array per encoder block, only for the Adp
    variants. The geographic matrix is required by the GCN variants and
    ignored by the others.
    """
    if config.variant == "DLinear":
        return dlinear_forward(params, x), []
    x = x if isinstance(x, Tensor) else nc.constant(np.asarray(x, dtype=np.float64))
    b, n, t, c = x.shape
    if (t, c) != (config.T, config.C):
        raise nc.ShapeError(f"input block {x.shape} disagrees with config T={config.T}, C={config.C}")
    if config.uses_geo and geo is None:
        raise ValueError(f"variant {config.variant} requires a geographic adjacency")
    if adjacency_options is None:
        adjacency_options = graph.AdjacencyOptions()

    geo_norm = None
    if config.uses_geo:
        geo_norm = nc.constant(graph.normalize_sym(geo.matrix))

    z = nc.add(nc.linear(x, params["embed.W"], params["embed.b"]),
               nc.constant(positional_encoding(t, config.D)))
    snapshots: list[np.ndarray] = []
    for l in range(config.L):
        p = f"block{l}"
        a_s = None
        if config.uses_adp:
            if generated_override is not None:
                a_s = nc.constant(np.broadcast_to(generated_override, (b, n, n)).copy())
            else:
                m_n = node_attention(z, params[f"{p}.node_attn.Wq"], params[f"{p}.node_attn.Wk"])
                a_s = _generated_adjacency(m_n, geo, adjacency_options, rho_default, literal_rho)
            snapshots.append(a_s.data.copy())
        z_t = nc.add(z, nc.layer_norm(
            temporal_attention(z, params[f"{p}.attn.Wq"], params[f"{p}.attn.Wk"],
                               params[f"{p}.attn.Wv"], params[f"{p}.attn.Wp"], config.heads),
            params[f"{p}.norm_attn.gamma"], params[f"{p}.norm_attn.beta"]))
        if config.variant == "Trans":
            z = nc.add(z_t, nc.layer_norm(_ffn(z_t, params, p),
                                          params[f"{p}.norm_ffn.gamma"],
                                          params[f"{p}.norm_ffn.beta"]))
        else:
            h_geo = h_adp = None
            if config.uses_geo:
                thetas = [params[f"{p}.gcn.geo.theta{k}"] for k in range(config.K + 1)]
                h_geo = gcn_propagate(geo_norm, z_t, thetas)
            if config.uses_adp:
                thetas = [params[f"{p}.gcn.adp.theta{k}"] for k in range(config.K + 1)]
                h_adp = gcn_propagate(normalize_sym_t(a_s), z_t, thetas)
            h = dual_fuse(h_geo, h_adp, params[f"{p}.fuse.Wx"])
            z = block_update(h, z_t)
    u = nc.matmul(nc.transpose(z, (0, 1, 3, 2)), params["decoder.Wo"])   # (B,N,D,F)
    y = nc.matmul(nc.transpose(u, (0, 1, 3, 2)), params["decoder.Wg"])   # (B,N,F,C)
    return y, snapshots


def forward(config: ModelConfig, params: dict[str, Tensor], x,
            geo: graph.GeoAdjacency | None = None, **kwargs) -> tuple[Tensor, list[np.ndarray]]:
    """Single-instance convenience: (N, T, C) -> ((N, F, C), snapshots)."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    y, snaps = forward_batch(config, params, arr[None, ...], geo, **kwargs)
    y1 = nc.reshape(y, y.shape[1:])
    return y1, [s[0] for s in snaps]


def dlinear_forward(params: dict[str, Tensor], x) -> Tensor:
    """Per-site, per-channel linear maps T -> F, averaged over channels.

    Returns an incidence-only forecast of shape (..., N, F, 1).
    """
    x = x if isinstance(x, Tensor) else nc.constant(np.asarray(x, dtype=np.float64))
    squeeze = x.ndim == 3
    if squeeze:
        x = nc.reshape(x, (1, *x.shape))
    b, n, t, c = x.shape
    w, bias = params["dlinear.W"], params["dlinear.b"]
    f = w.shape[-1]
    xt = nc.reshape(nc.transpose(x, (0, 1, 3, 2)), (b, n, c, 1, t))
    prod = nc.add(nc.reshape(nc.matmul(xt, w), (b, n, c, f)), bias)
    y = nc.reshape(nc.mean_axis(prod, axis=2), (b, n, f, 1))
    return nc.reshape(y, (n, f, 1)) if squeeze else y


def persistence_forecast(x: np.ndarray, F: int) -> np.ndarray:
    """Repeat the last observed value: the minimal sanity baseline."""
    x = np.asarray(x, dtype=np.float64)
    last = x[..., -1:, :]
    reps = [1] * x.ndim
    reps[-2] = F
    return np.tile(last, reps)
