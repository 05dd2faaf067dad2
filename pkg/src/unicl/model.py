"""Decoder-only transformer with sparse top-k mixture-of-experts feed-forward layers."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ROUTER_INPUTS = ("token", "token+segment")
NUM_SEGMENT_KINDS = 4


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 1125
    num_layers: int = 4
    hidden_size: int = 128
    num_heads: int = 4
    max_positions: int = 1024
    moe_layer_indices: tuple[int, ...] = (1, 3)
    num_experts: int = 4
    top_k: int = 2
    ffn_multiplier: int = 4
    layer_norm_epsilon: float = 1e-12
    renormalize_gates: bool = False
    router_input: str = "token"
    # first ids of the image, bin and special segments; used by the segment-aware router
    segment_starts: tuple[int, ...] = ()
    position_init: str = "sinusoid"
    init_std: float = 0.02

    def __post_init__(self):
        self.moe_layer_indices = tuple(sorted(int(i) for i in self.moe_layer_indices))
        self.segment_starts = tuple(int(i) for i in self.segment_starts)
        if self.hidden_size % self.num_heads:
            raise ModelError(f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ModelError(f"need 1 <= top_k <= num_experts, got k={self.top_k}, N={self.num_experts}")
        if any(not 0 <= i < self.num_layers for i in self.moe_layer_indices):
            raise ModelError(f"moe_layer_indices {self.moe_layer_indices} outside [0, {self.num_layers})")
        if self.layer_norm_epsilon <= 0:
            raise ModelError("layer_norm_epsilon must be positive")
        if self.router_input not in ROUTER_INPUTS:
            raise ModelError(f"router_input must be one of {ROUTER_INPUTS}")
        if self.router_input == "token+segment" and len(self.segment_starts) != NUM_SEGMENT_KINDS - 1:
            raise ModelError("segment-aware routing needs segment_starts for image, bin and special")
        if self.position_init not in ("sinusoid", "normal", "zeros"):
            raise ModelError(f"unknown position_init {self.position_init!r}")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def tiny_config(vocab_size: int, **overrides) -> ModelConfig:
    """The desk-scale configuration used by the reference experiments."""
    base = dict(
        vocab_size=vocab_size,
        num_layers=4,
        hidden_size=128,
        num_heads=4,
        max_positions=1024,
        moe_layer_indices=(1, 3),
        num_experts=4,
        top_k=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class MoeStats:
    """Per-expert routed fraction ``f`` (constant) and mean router probability ``P`` (differentiable)."""

    f: torch.Tensor
    P: torch.Tensor


@dataclass
class GateDecision:
    expert_indices: torch.Tensor  # (M, k), descending by weight
    gate_weights: torch.Tensor  # (M, k)
    probs: torch.Tensor = field(repr=False, default=None)  # (M, N) full softmax


ROW_CHUNK = 64


def _chunked_affine(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``x @ w + b`` over rows in fixed-size zero-padded chunks.

    GEMM kernels pick different code paths for different row counts, so a row's
    result could depend on how many other tokens share its expert. Fixed chunk
    shapes make every row's output a function of that row alone.
    """
    n = x.shape[0]
    m = -(-n // ROW_CHUNK) * ROW_CHUNK
    if m == 0:
        return x.new_zeros(0, w.shape[1])
    if m > n:
        x = torch.cat([x, x.new_zeros(m - n, x.shape[1])])
    c = m // ROW_CHUNK
    out = torch.baddbmm(b.expand(c, 1, -1), x.view(c, ROW_CHUNK, -1), w.expand(c, -1, -1))
    return out.reshape(m, -1)[:n]


class FFN(nn.Module):
    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.w_in = nn.Parameter(torch.empty(d, hidden))
        self.b_in = nn.Parameter(torch.zeros(hidden))
        self.w_out = nn.Parameter(torch.empty(hidden, d))
        self.b_out = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        flat = x.reshape(-1, x.shape[-1])
        h = F.gelu(_chunked_affine(flat, self.w_in, self.b_in), approximate="tanh")
        return _chunked_affine(h, self.w_out, self.b_out).reshape(x.shape)


class MoELayer(nn.Module):
    """N expert FFNs behind a softmax router; each token runs only its top-k experts."""

    def __init__(self, d: int, hidden: int, num_experts: int, top_k: int, renormalize: bool = False, router_extra: int = 0):
        super().__init__()
        self.num_experts = num_experts
        self.top_k = top_k
        self.renormalize = renormalize
        self.router = nn.Linear(d + router_extra, num_experts, bias=False)
        self.experts = nn.ModuleList(FFN(d, hidden) for _ in range(num_experts))

    def gate(self, x: torch.Tensor, route_extra: torch.Tensor | None = None) -> GateDecision:
        r_in = x if route_extra is None else torch.cat([x, route_extra.to(x.dtype)], dim=-1)
        probs = F.softmax(self.router(r_in), dim=-1)
        # stable descending sort: equal probabilities keep the lower expert index first
        idx = torch.sort(probs.detach(), dim=-1, descending=True, stable=True).indices[:, : self.top_k]
        w = probs.gather(1, idx)
        if self.renormalize:
            w = w / w.sum(dim=-1, keepdim=True)
        return GateDecision(idx, w, probs)

    def forward(self, x: torch.Tensor, route_extra: torch.Tensor | None = None):
        shape = x.shape
        flat = x.reshape(-1, shape[-1])
        extra = None if route_extra is None else route_extra.reshape(flat.shape[0], -1)
        dec = self.gate(flat, extra)
        y = torch.zeros_like(flat)
        for e, expert in enumerate(self.experts):
            tok, slot = torch.nonzero(dec.expert_indices == e, as_tuple=True)
            if tok.numel() == 0:
                continue
            out = expert(flat[tok]) * dec.gate_weights[tok, slot].unsqueeze(-1)
            y = y.index_add(0, tok, out)
        counts = torch.bincount(dec.expert_indices.reshape(-1), minlength=self.num_experts).to(flat.dtype)
        stats = MoeStats(f=counts / counts.sum(), P=dec.probs.mean(dim=0))
        return y.reshape(shape), stats, dec

    def dense_forward(self, x: torch.Tensor, route_extra: torch.Tensor | None = None) -> torch.Tensor:
        """Every expert on every token, weighted by gates zeroed outside the top-k."""
        flat = x.reshape(-1, x.shape[-1])
        extra = None if route_extra is None else route_extra.reshape(flat.shape[0], -1)
        dec = self.gate(flat, extra)
        gates = torch.zeros_like(dec.probs).scatter(1, dec.expert_indices, dec.gate_weights)
        y = torch.zeros_like(flat)
        for e, expert in enumerate(self.experts):
            y = y + gates[:, e : e + 1] * expert(flat)
        return y.reshape(x.shape)


def moe_forward(x: torch.Tensor, layer: MoELayer, route_extra=None):
    if x.shape[-1] != layer.router.in_features - (0 if route_extra is None else route_extra.shape[-1]):
        raise ModelError(f"token state width {x.shape[-1]} does not match the layer")
    return layer(x, route_extra)


class CausalSelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)

    def forward(self, x, cache: dict | None = None):
        b, t, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=2)
        hd = d // self.heads
        q, k, v = (z.view(b, t, self.heads, hd).transpose(1, 2) for z in (q, k, v))
        if cache is not None and "k" in cache:
            k = torch.cat([cache["k"], k], dim=2)
            v = torch.cat([cache["v"], v], dim=2)
        if cache is not None:
            cache["k"], cache["v"] = k, v
        past = k.shape[2] - t
        if past == 0:
            y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        elif t == 1:
            y = F.scaled_dot_product_attention(q, k, v)
        else:
            keep = torch.ones(t, past + t, dtype=torch.bool, device=x.device).tril(diagonal=past)
            y = F.scaled_dot_product_attention(q, k, v, attn_mask=keep)
        return self.proj(y.transpose(1, 2).reshape(b, t, d))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, is_moe: bool):
        super().__init__()
        d = cfg.hidden_size
        self.ln1 = nn.LayerNorm(d, eps=cfg.layer_norm_epsilon)
        self.attn = CausalSelfAttention(d, cfg.num_heads)
        self.ln2 = nn.LayerNorm(d, eps=cfg.layer_norm_epsilon)
        self.is_moe = is_moe
        if is_moe:
            extra = NUM_SEGMENT_KINDS if cfg.router_input == "token+segment" else 0
            self.mlp = MoELayer(d, cfg.ffn_multiplier * d, cfg.num_experts, cfg.top_k, cfg.renormalize_gates, extra)
        else:
            self.mlp = FFN(d, cfg.ffn_multiplier * d)

    def forward(self, x, route_extra=None, cache=None):
        x = x + self.attn(self.ln1(x), cache)
        if self.is_moe:
            m, stats, _ = self.mlp(self.ln2(x), route_extra)
            return x + m, stats
        return x + self.mlp(self.ln2(x)), None


def sinusoid_table(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)[None, :]
    ang = pos / torch.pow(10000.0, i / d)
    table = torch.zeros(n, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(ang)
    table[:, 1::2] = torch.cos(ang[:, : d // 2])
    return table


class DecoderModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_size
        self.tok_emb = nn.Embedding(cfg.vocab_size, d)
        self.pos_emb = nn.Embedding(cfg.max_positions, d)
        self.blocks = nn.ModuleList(Block(cfg, i in cfg.moe_layer_indices) for i in range(cfg.num_layers))
        self.ln_f = nn.LayerNorm(d, eps=cfg.layer_norm_epsilon)
        self.head = nn.Linear(d, cfg.vocab_size, bias=False)
        if cfg.router_input == "token+segment":
            kinds = torch.zeros(cfg.vocab_size, dtype=torch.long)
            for j, start in enumerate(cfg.segment_starts):
                kinds[start:] = j + 1
            self.register_buffer("segment_kind", kinds, persistent=False)
        else:
            self.segment_kind = None
        self.reset_parameters()

    def reset_parameters(self) -> None:
        std = self.cfg.init_std
        for name, p in self.named_parameters():
            if name.endswith(("bias", "b_in", "b_out")):
                nn.init.zeros_(p)
            elif ".ln" in name or name.startswith("ln_f"):
                nn.init.ones_(p)
            else:
                nn.init.normal_(p, 0.0, std)
        # residual output projections scaled by depth, as in GPT-2
        for name, p in self.named_parameters():
            if name.endswith(("proj.weight", "w_out")):
                nn.init.normal_(p, 0.0, std / math.sqrt(2 * self.cfg.num_layers))
        with torch.no_grad():
            if self.cfg.position_init == "sinusoid":
                self.pos_emb.weight.copy_(sinusoid_table(self.cfg.max_positions, self.cfg.hidden_size) * 0.1)
            elif self.cfg.position_init == "zeros":
                self.pos_emb.weight.zero_()

    @property
    def moe_layers(self) -> list[MoELayer]:
        return [b.mlp for b in self.blocks if b.is_moe]

    def embed(self, ids: torch.Tensor, start_pos: int = 0) -> torch.Tensor:
        if ids.dim() == 1:
            ids = ids[None]
        t = ids.shape[1]
        if start_pos + t > self.cfg.max_positions:
            raise ModelError(f"sequence of {start_pos + t} positions exceeds max_positions={self.cfg.max_positions}")
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.cfg.vocab_size):
            raise ModelError(f"token id outside [0, {self.cfg.vocab_size})")
        pos = torch.arange(start_pos, start_pos + t, device=ids.device)
        return self.tok_emb(ids) + self.pos_emb(pos)[None]

    def forward(self, ids: torch.Tensor, caches: list | None = None, start_pos: int = 0):
        """Logits ``(B, T, V)`` and the routing statistics of every MoE layer."""
        if ids.dim() == 1:
            ids = ids[None]
        x = self.embed(ids, start_pos)
        route_extra = None
        if self.segment_kind is not None:
            route_extra = F.one_hot(self.segment_kind[ids], NUM_SEGMENT_KINDS)
        stats = []
        for i, block in enumerate(self.blocks):
            x, s = block(x, route_extra, None if caches is None else caches[i])
            if s is not None:
                stats.append(s)
        return self.head(self.ln_f(x)), stats


def decoder_forward(ids, model: DecoderModel) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    logits, _ = model(ids)
    return logits[0] if ids.dim() == 1 else logits


# ---------------------------------------------------------------------------
# sampling and generation


@dataclass
class Greedy:
    pass


class Temperature:
    """Categorical draw from ``softmax(logits / tau)``; owns its seeded RNG."""

    def __init__(self, tau: float, seed: int = 0):
        if not tau > 0:
            raise ModelError(f"temperature must be positive, got {tau}")
        self.tau = float(tau)
        self.rng = np.random.default_rng(seed)


def sample_next(logits, strategy=None) -> int:
    z = np.asarray(torch.as_tensor(logits).detach().cpu().double(), dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(z)):
        raise ModelError("non-finite logits")
    if strategy is None or isinstance(strategy, Greedy):
        return int(np.argmax(z))
    if isinstance(strategy, Temperature):
        p = np.exp((z - z.max()) / strategy.tau)
        p /= p.sum()
        u = strategy.rng.random()
        return int(min(np.searchsorted(np.cumsum(p), u, side="right"), len(p) - 1))
    raise ModelError(f"unknown sampling strategy {strategy!r}")


@torch.no_grad()
def generate_batch(model: DecoderModel, prefixes, max_new: int, stop: int | None, strategy=None) -> list[list[int]]:
    """Continue equal-length prefixes; each row ends at ``stop`` (excluded) or ``max_new``."""
    prefixes = [list(p) for p in prefixes]
    if not prefixes:
        return []
    n = len(prefixes[0])
    if any(len(p) != n for p in prefixes):
        raise ModelError("generate_batch needs equal-length prefixes")
    if n + max_new > model.cfg.max_positions:
        raise ModelError(f"prefix {n} + max_new {max_new} exceeds max_positions={model.cfg.max_positions}")
    if max_new <= 0:
        return [[] for _ in prefixes]
    was_training = model.training
    model.eval()
    caches = [{} for _ in model.blocks]
    ids = torch.tensor(prefixes, dtype=torch.long)
    logits, _ = model(ids, caches, 0)
    out: list[list[int]] = [[] for _ in prefixes]
    done = [False] * len(prefixes)
    pos = n
    for step in range(max_new):
        last = logits[:, -1]
        nxt = []
        for r in range(len(prefixes)):
            tok = sample_next(last[r], strategy) if not done[r] else (stop if stop is not None else 0)
            if not done[r]:
                if stop is not None and tok == stop:
                    done[r] = True
                else:
                    out[r].append(tok)
            nxt.append(tok)
        if all(done) or step == max_new - 1:
            break
        logits, _ = model(torch.tensor(nxt, dtype=torch.long)[:, None], caches, pos)
        pos += 1
    model.train(was_training)
    return out


def generate(prefix, max_new: int, stop: int | None, model: DecoderModel, strategy=None) -> list[int]:
    return generate_batch(model, [prefix], max_new, stop, strategy)[0]


# ---------------------------------------------------------------------------
# checkpoints
#
# line 1: "unicl-checkpoint 1"
# line 2: JSON manifest {config, tensors: [[name, shape, dtype], ...], extra}
# rest:   raw little-endian tensor payload in manifest order

_CKPT_MAGIC = b"unicl-checkpoint 1\n"


def _config_to_json(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["moe_layer_indices"] = list(cfg.moe_layer_indices)
    d["segment_starts"] = list(cfg.segment_starts)
    return d


def checkpoint_bytes(model: DecoderModel, extra: dict | None = None) -> bytes:
    state = model.state_dict()
    names = sorted(state)
    tensors = []
    payload = []
    for name in names:
        arr = state[name].detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        tensors.append([name, list(arr.shape), arr.dtype.str])
        payload.append(arr.tobytes())
    manifest = {"config": _config_to_json(model.cfg), "tensors": tensors, "extra": extra or {}}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    return _CKPT_MAGIC + head + b"".join(payload)


def save_checkpoint(path, model: DecoderModel, extra: dict | None = None) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(p.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, extra))
    tmp.replace(p)


def load_checkpoint(path) -> tuple[DecoderModel, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(_CKPT_MAGIC):
        raise ModelError(f"{path}: not a checkpoint (bad header)")
    rest = raw[len(_CKPT_MAGIC) :]
    head, _, payload = rest.partition(b"\n")
    manifest = json.loads(head)
    cfg = ModelConfig(**manifest["config"])
    model = DecoderModel(cfg)
    state = {}
    off = 0
    for name, shape, dtype in manifest["tensors"]:
        dt = np.dtype(dtype)
        n = int(np.prod(shape)) * dt.itemsize
        arr = np.frombuffer(payload[off : off + n], dtype=dt).reshape(shape).copy()
        state[name] = torch.from_numpy(arr)
        off += n
    if off != len(payload):
        raise ModelError(f"{path}: payload size mismatch")
    first = next(iter(state.values()))
    model.to(first.dtype)
    model.load_state_dict(state)
    return model, manifest["extra"]
