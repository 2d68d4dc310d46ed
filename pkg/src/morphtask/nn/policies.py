"""Policy architectures over control graphs: MLP, GNN, Transformer, and the
tokenized Transformer variants, all built on the local autodiff engine.

The Transformer internally reorders nodes into a value-derived canonical
order before attention and scatters results back.  Every reduction then sees
the same operand sequence no matter how the caller ordered the nodes, which
makes permutation equivariance (PE off) hold bit-exactly instead of only up
to float round-off.  Position embeddings are gathered by original node index,
so enabling them restores position awareness unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..control_graph import ControlGraph, detokenize, mu_law, quantize
from . import autodiff as ad
from .autodiff import Tensor, check_finite

LN_EPS = 1e-5

ARCHS = ("mlp", "gnn", "transformer", "transformer_tokenized")


class ConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class UnsupportedVariantError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    arch: str
    feature_width: int
    embed: int = 256
    attn_hidden: int = 512
    heads: int = 2
    layers: int = 3
    mlp_hidden: int = 1024
    mlp_layers: int = 2
    gnn_hidden: int = 256
    gnn_layers: int = 3
    use_pe: bool = True
    use_embed_ln: bool = False
    max_nodes: int = 48
    max_action: int = 48
    token_variant: str = "c"     # d | da | c (tokenized arch only)
    n_bins: int = 1024
    cg_variant: str = "v2"       # control-graph layout this policy consumes
    history: int = 1             # stacked frames per node
    obs_flags: tuple = ("p", "v", "q", "a", "ja", "jr", "m")

    def __post_init__(self):
        object.__setattr__(self, "obs_flags", tuple(self.obs_flags))
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.arch in ("transformer", "transformer_tokenized") \
                and self.embed % self.heads != 0:
            raise ConfigError(
                f"embed {self.embed} not divisible by heads {self.heads}")
        if self.token_variant not in ("d", "da", "c"):
            raise ConfigError(f"unknown token variant {self.token_variant!r}")


@dataclass
class PolicyParams:
    arch: str
    config: PolicyConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def clone(self) -> "PolicyParams":
        return PolicyParams(self.arch, self.config, {
            k: ad.parameter(v.data.copy()) for k, v in self.tensors.items()})


def parameter_count(params: PolicyParams) -> int:
    return sum(t.data.size for t in params.tensors.values())


def init_params(arch: str, config: PolicyConfig, seed: int) -> PolicyParams:
    """Glorot-uniform weights, zero biases, N(0, 0.02) position table."""
    if config.arch != arch:
        config = replace(config, arch=arch)
    rng = np.random.Generator(np.random.PCG64(seed))
    params = PolicyParams(arch=arch, config=config)

    def glorot(name, fan_in, fan_out, shape=None):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        shape = shape or (fan_in, fan_out)
        params.tensors[name] = ad.parameter(rng.uniform(-bound, bound, size=shape))

    def zeros(name, shape):
        params.tensors[name] = ad.parameter(np.zeros(shape))

    def ones(name, shape):
        params.tensors[name] = ad.parameter(np.ones(shape))

    F = config.feature_width
    if arch == "mlp":
        w_in = config.max_nodes * F
        glorot("fc0/W", w_in, config.mlp_hidden)
        zeros("fc0/b", (config.mlp_hidden,))
        for i in range(1, config.mlp_layers):
            glorot(f"fc{i}/W", config.mlp_hidden, config.mlp_hidden)
            zeros(f"fc{i}/b", (config.mlp_hidden,))
        glorot("out/W", config.mlp_hidden, config.max_action)
        zeros("out/b", (config.max_action,))
        return params
    if arch == "gnn":
        width = F
        for i in range(config.gnn_layers):
            glorot(f"round{i}/self/W", width, config.gnn_hidden)
            glorot(f"round{i}/msg/W", width, config.gnn_hidden)
            zeros(f"round{i}/b", (config.gnn_hidden,))
            width = config.gnn_hidden
        glorot("decode/W", width, 3)
        zeros("decode/b", (3,))
        return params

    E = config.embed
    glorot("embed/W", F, E)
    zeros("embed/b", (E,))
    if config.use_pe:
        params.tensors["pe"] = ad.parameter(
            rng.normal(0.0, 0.02, size=(config.max_nodes, E)))
    if config.use_embed_ln:
        ones("embed_ln/gamma", (E,))
        zeros("embed_ln/beta", (E,))
    for layer in range(config.layers):
        p = f"layer{layer}"
        for w in ("Wq", "Wk", "Wv", "Wo"):
            glorot(f"{p}/attn/{w}", E, E)
        for b in ("bq", "bk", "bv", "bo"):
            zeros(f"{p}/attn/{b}", (E,))
        ones(f"{p}/ln1/gamma", (E,))
        zeros(f"{p}/ln1/beta", (E,))
        glorot(f"{p}/ffn/W1", E, config.attn_hidden)
        zeros(f"{p}/ffn/b1", (config.attn_hidden,))
        glorot(f"{p}/ffn/W2", config.attn_hidden, E)
        zeros(f"{p}/ffn/b2", (E,))
        ones(f"{p}/ln2/gamma", (E,))
        zeros(f"{p}/ln2/beta", (E,))
    glorot("decode/W", E + F, 3)
    zeros("decode/b", (3,))
    if arch == "transformer_tokenized" and config.token_variant in ("d", "da"):
        glorot("logits/W", E + F, 3 * config.n_bins)
        zeros("logits/b", (3 * config.n_bins,))
    return params


# --- canonical node ordering -----------------------------------------------

def _canonical_perm(feats: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-sample node order keyed only by row bytes.

    Ties are bit-identical rows, whose contributions are interchangeable, so
    a stable sort keeps the canonical value sequence unique.
    """
    B, n, _ = feats.shape
    combined = np.ascontiguousarray(np.concatenate([feats, mask], axis=-1))
    rows = combined.view(np.dtype((np.void, combined.shape[-1] * 8)))
    return np.argsort(rows.reshape(B, n), axis=1, kind="stable")


# --- transformer -------------------------------------------------------------

def _mha(params: PolicyParams, layer: int, z: Tensor):
    """Multi-head attention; returns output tensor and attention weights."""
    cfg = params.config
    B, n, E = z.shape
    H = cfg.heads
    dk = E // H
    p = f"layer{layer}/attn"
    t = params.tensors

    def heads(x):
        x = ad.reshape(x, (B, n, H, dk))
        return ad.transpose(x, (0, 2, 1, 3))        # (B, H, n, dk)

    q = heads(ad.linear(z, t[f"{p}/Wq"], t[f"{p}/bq"]))
    k = heads(ad.linear(z, t[f"{p}/Wk"], t[f"{p}/bk"]))
    v = heads(ad.linear(z, t[f"{p}/Wv"], t[f"{p}/bv"]))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
    attn = ad.softmax(scores)                        # (B, H, n, n)
    mixed = ad.matmul(attn, v)
    mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (B, n, E))
    out = ad.linear(mixed, t[f"{p}/Wo"], t[f"{p}/bo"])
    return out, attn.data


def _trunk(params: PolicyParams, feats_c: np.ndarray,
           pe_rows: np.ndarray | None):
    """Embed + L transformer blocks on canonically ordered features."""
    cfg = params.config
    t = params.tensors
    x = Tensor(feats_c)
    z = ad.linear(x, t["embed/W"], t["embed/b"])
    if pe_rows is not None:
        z = ad.add(z, ad.gather_rows(t["pe"], pe_rows))
    if cfg.use_embed_ln:
        z = ad.layer_norm(z, t["embed_ln/gamma"], t["embed_ln/beta"], LN_EPS)
    check_finite("embed", z)
    attn_stack = []
    for layer in range(cfg.layers):
        p = f"layer{layer}"
        mha_out, attn = _mha(params, layer, z)
        attn_stack.append(attn)
        z = ad.layer_norm(ad.add(mha_out, z),
                          t[f"{p}/ln1/gamma"], t[f"{p}/ln1/beta"], LN_EPS)
        h = ad.relu(ad.linear(z, t[f"{p}/ffn/W1"], t[f"{p}/ffn/b1"]))
        f = ad.linear(h, t[f"{p}/ffn/W2"], t[f"{p}/ffn/b2"])
        z = ad.layer_norm(ad.add(f, z),
                          t[f"{p}/ln2/gamma"], t[f"{p}/ln2/beta"], LN_EPS)
        check_finite(p, z)
    return z, np.stack(attn_stack, axis=1)           # attn (B, L, H, n, n)


def transformer_grid(params: PolicyParams, feats: np.ndarray, mask: np.ndarray):
    """Batched forward: (B, n, F) -> masked tanh grid (B, n, 3) + attention.

    Nodes are canonicalized per sample; outputs and attention maps are
    scattered back to the caller's order.
    """
    cfg = params.config
    B, n, F = feats.shape
    if F != cfg.feature_width:
        raise ShapeError(
            f"feature width {F} does not match config {cfg.feature_width}")
    if cfg.use_pe and n > cfg.max_nodes:
        raise ShapeError(f"{n} nodes exceed position table ({cfg.max_nodes})")
    perm = _canonical_perm(feats, mask)
    binx = np.arange(B)[:, None]
    feats_c = feats[binx, perm]
    mask_c = mask[binx, perm]
    pe_rows = perm if cfg.use_pe else None
    z, attn_c = _trunk(params, feats_c, pe_rows)
    dec = ad.concat([z, Tensor(feats_c)], axis=-1)
    grid_c = ad.tanh(ad.linear(dec, params.tensors["decode/W"],
                               params.tensors["decode/b"]))
    grid_c = ad.mul(grid_c, Tensor(mask_c))
    # scatter back to caller order
    cpos = np.argsort(perm, axis=1)                  # original i -> canonical slot
    grid = _scatter_rows(grid_c, cpos)
    attn = np.take_along_axis(attn_c, cpos[:, None, None, :, None], axis=3)
    attn = np.take_along_axis(attn, cpos[:, None, None, None, :], axis=4)
    return grid, attn


def _scatter_rows(grid_c: Tensor, cpos: np.ndarray) -> Tensor:
    """Reorder (B, n, k) rows by per-sample index map, keeping gradients."""
    B, n, k = grid_c.shape
    flat_index = (np.arange(B)[:, None] * n + cpos).reshape(-1)
    flat = ad.reshape(grid_c, (B * n, k))
    return ad.reshape(ad.gather_rows(flat, flat_index), (B, n, k))


def actions_from_grid(grid: np.ndarray, cg: ControlGraph) -> np.ndarray:
    out = np.empty(len(cg.actuator_map))
    for dof, (node, slot) in enumerate(cg.actuator_map):
        out[dof] = grid[node, slot]
    return out


def transformer_forward(params: PolicyParams, cg: ControlGraph):
    """Action vector plus per-layer/head attention maps for one control graph."""
    grid, attn = transformer_grid(params, cg.node_features[None], cg.action_mask[None])
    return actions_from_grid(grid.data[0], cg), attn[0]


# --- gnn ------------------------------------------------------------------------

def _adjacency(cg: ControlGraph) -> np.ndarray:
    n = cg.n_nodes
    A = np.zeros((n, n))
    for p, c in cg.edges:
        A[p, c] = 1.0
        A[c, p] = 1.0
    return A


def gnn_grid(params: PolicyParams, feats: np.ndarray, mask: np.ndarray,
             adjacency: np.ndarray) -> Tensor:
    cfg = params.config
    t = params.tensors
    h = Tensor(feats)
    A = Tensor(adjacency)
    for i in range(cfg.gnn_layers):
        msgs = ad.matmul(A, h)
        h = ad.relu(ad.add(ad.linear(h, t[f"round{i}/self/W"], t[f"round{i}/b"]),
                           ad.matmul(msgs, t[f"round{i}/msg/W"])))
        check_finite(f"round{i}", h)
    grid = ad.tanh(ad.linear(h, t["decode/W"], t["decode/b"]))
    return ad.mul(grid, Tensor(mask))


def gnn_forward(params: PolicyParams, cg: ControlGraph) -> np.ndarray:
    """Message passing over the body tree; control graph v1 only."""
    if cg.variant != "v1":
        raise UnsupportedVariantError("gnn_forward requires control graph v1")
    grid = gnn_grid(params, cg.node_features[None], cg.action_mask[None],
                    _adjacency(cg))
    return actions_from_grid(grid.data[0], cg)


# --- mlp ------------------------------------------------------------------------

def flatten_cg(cg: ControlGraph, max_nodes: int) -> np.ndarray:
    """Row-major flatten zero-padded to the configured node budget."""
    n, F = cg.node_features.shape
    if n > max_nodes:
        raise ShapeError(f"{n} nodes exceed MLP budget {max_nodes}")
    flat = np.zeros(max_nodes * F)
    flat[:n * F] = cg.node_features.reshape(-1)
    return flat


def mlp_vector(params: PolicyParams, flat: np.ndarray) -> Tensor:
    cfg = params.config
    t = params.tensors
    if flat.shape[-1] != cfg.max_nodes * cfg.feature_width:
        raise ShapeError(
            f"flat width {flat.shape[-1]} does not match configured "
            f"{cfg.max_nodes * cfg.feature_width}")
    h = Tensor(flat)
    for i in range(cfg.mlp_layers):
        h = ad.relu(ad.linear(h, t[f"fc{i}/W"], t[f"fc{i}/b"]))
        check_finite(f"fc{i}", h)
    return ad.tanh(ad.linear(h, t["out/W"], t["out/b"]))


def mlp_forward(params: PolicyParams, cg: ControlGraph) -> np.ndarray:
    """Flattened-input baseline; output truncated to the action dimension."""
    flat = flatten_cg(cg, params.config.max_nodes)
    vec = mlp_vector(params, flat[None])
    n_act = len(cg.actuator_map)
    if n_act > params.config.max_action:
        raise ShapeError(
            f"action dim {n_act} exceeds MLP head {params.config.max_action}")
    return vec.data[0, :n_act].copy()


# --- tokenized variants ------------------------------------------------------------

def tokenized_head_forward(params: PolicyParams, token_grid: np.ndarray,
                           cg: ControlGraph):
    """Decode actions from an integer token grid (variants d / da / c).

    The token embedding is the factored form: bin -> center value -> inverse
    mu-law -> the trunk's linear node embedding.  With variant c the result
    therefore coincides with transformer_forward on detokenized features.
    """
    cfg = params.config
    tokens = np.asarray(token_grid)
    if tokens.min() < 0 or tokens.max() >= cfg.n_bins:
        raise IndexError(f"token outside [0, {cfg.n_bins})")
    feats = detokenize(tokens, "center", cfg.n_bins)
    if cfg.token_variant == "c":
        grid, attn = transformer_grid(params, feats[None], cg.action_mask[None])
        return actions_from_grid(grid.data[0], cg), attn[0]
    logits, attn = tokenized_logits(params, feats[None], cg.action_mask[None])
    bins = np.argmax(logits.data[0], axis=-1)        # (n, 3)
    mode = "center" if cfg.token_variant == "d" else "average_window"
    values = detokenize(bins, mode, cfg.n_bins) * cg.action_mask
    return actions_from_grid(values, cg), attn[0]


def tokenized_logits(params: PolicyParams, feats: np.ndarray, mask: np.ndarray):
    """Per-slot bin logits for the discretized heads (training path)."""
    cfg = params.config
    B, n, F = feats.shape
    perm = _canonical_perm(feats, mask)
    binx = np.arange(B)[:, None]
    feats_c = feats[binx, perm]
    pe_rows = perm if cfg.use_pe else None
    z, attn_c = _trunk(params, feats_c, pe_rows)
    dec = ad.concat([z, Tensor(feats_c)], axis=-1)
    logits_c = ad.linear(dec, params.tensors["logits/W"],
                         params.tensors["logits/b"])
    logits_c = ad.reshape(logits_c, (B, n, 3, cfg.n_bins))
    cpos = np.argsort(perm, axis=1)
    Bn = B * n
    flat = ad.reshape(logits_c, (Bn, 3 * cfg.n_bins))
    flat_index = (np.arange(B)[:, None] * n + cpos).reshape(-1)
    logits = ad.reshape(ad.gather_rows(flat, flat_index), (B, n, 3, cfg.n_bins))
    attn = np.take_along_axis(attn_c, cpos[:, None, None, :, None], axis=3)
    attn = np.take_along_axis(attn, cpos[:, None, None, None, :], axis=4)
    return logits, attn


def tokenize_actions(actions_grid: np.ndarray, n_bins: int = 1024) -> np.ndarray:
    """Expert action grid -> target bins for the discretized heads."""
    return quantize(mu_law(actions_grid), n_bins)


def batch_grids(params: PolicyParams, feats: np.ndarray, mask: np.ndarray,
                adjacency: np.ndarray | None = None) -> np.ndarray:
    """Inference-only action grids (B, n, 3) for the per-node architectures."""
    cfg = params.config
    if cfg.arch == "gnn":
        return gnn_grid(params, feats, mask, adjacency).data
    if cfg.arch == "transformer":
        return transformer_grid(params, feats, mask)[0].data
    if cfg.arch == "transformer_tokenized":
        tokens = quantize(mu_law(feats), cfg.n_bins)
        detok = detokenize(tokens, "center", cfg.n_bins)
        if cfg.token_variant == "c":
            return transformer_grid(params, detok, mask)[0].data
        logits, _ = tokenized_logits(params, detok, mask)
        bins = np.argmax(logits.data, axis=-1)
        mode = "center" if cfg.token_variant == "d" else "average_window"
        return detokenize(bins, mode, cfg.n_bins) * mask
    raise ConfigError(f"batch_grids does not handle arch {cfg.arch!r}")


# --- dispatch ------------------------------------------------------------------------

def backward(params: PolicyParams, cg_batch, loss_fn) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of loss_fn(params, cg_batch) per tensor."""
    params.zero_grad()
    loss = loss_fn(params, cg_batch)
    loss.backward()
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in params.tensors.items()}


def policy_action(params: PolicyParams, cg: ControlGraph) -> np.ndarray:
    """Action vector for one control graph under any architecture."""
    if params.arch == "mlp":
        return mlp_forward(params, cg)
    if params.arch == "gnn":
        return gnn_forward(params, cg)
    if params.arch == "transformer":
        return transformer_forward(params, cg)[0]
    if params.arch == "transformer_tokenized":
        from ..control_graph import tokenize_cg
        return tokenized_head_forward(params, tokenize_cg(cg, params.config.n_bins),
                                      cg)[0]
    raise ConfigError(f"unknown architecture {params.arch!r}")
