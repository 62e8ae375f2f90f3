"""A deliberately small attention-only denoiser and deterministic DDIM steps.

The model exists to give the control losses something real to differentiate
through, not to denoise well. Per layer, the latent grid is block-averaged to
the layer resolution, projected to queries, and attended against either token
embeddings (cross attention) or itself (self attention):

    X = blockmean(z) @ Wq ...    A = softmax(Q K^T / sqrt(d)),   O = A V

The noise prediction is the mean over layers of each layer's output replicated
back to the full grid. Keys and values of cross-attention layers depend only
on the token embeddings, never on the timestep; the whole forward pass is in
fact timestep-independent, which keeps hand-written gradients tractable.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import CROSS, DECODER, ENCODER, SELF, AttentionMap, AttentionRecord, LayerAttention
from .errors import ConfigurationError, ShapeError
from .fileio import atomic_write_text, fnum


@dataclass(frozen=True)
class TokenEmbedding:
    """One conditioning token: an id, a d-vector, and whether it is trainable."""

    token_id: int
    vector: np.ndarray
    learnable: bool = False

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or v.size < 1:
            raise ShapeError("TokenEmbedding.vector: expected a 1-D vector")
        if not np.all(np.isfinite(v)):
            raise ValueError("TokenEmbedding.vector: non-finite values")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)


@dataclass(frozen=True)
class LayerSpec:
    """Projection weights and routing tags for one attention layer."""

    kind: str       # "encoder" | "decoder"
    attn_type: str  # "CA" | "SA"
    height: int
    width: int
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray

    def __post_init__(self):
        if self.kind not in (ENCODER, DECODER):
            raise ConfigurationError(f"bad layer kind {self.kind!r}")
        if self.attn_type not in (CROSS, SELF):
            raise ConfigurationError(f"bad attention type {self.attn_type!r}")
        if self.height < 1 or self.width < 1:
            raise ShapeError("layer extents must be positive")
        mats = []
        d = np.asarray(self.wq).shape[0]
        for name in ("wq", "wk", "wv"):
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if m.shape != (d, d):
                raise ShapeError(f"{name}: expected square ({d},{d}), got {m.shape}")
            if not np.all(np.isfinite(m)):
                raise ValueError(f"{name}: non-finite values")
            m = m.copy()
            m.setflags(write=False)
            mats.append(m)
        object.__setattr__(self, "wq", mats[0])
        object.__setattr__(self, "wk", mats[1])
        object.__setattr__(self, "wv", mats[2])

    @property
    def dim(self) -> int:
        return self.wq.shape[0]


@dataclass(frozen=True)
class DenoiserParams:
    """The full parameter set: embedding/channel width plus layer stack."""

    dim: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.dim < 1:
            raise ConfigurationError("dim must be >= 1")
        if not self.layers:
            raise ConfigurationError("need at least one layer")
        for l in self.layers:
            if l.dim != self.dim:
                raise ShapeError(f"layer dim {l.dim} != model dim {self.dim}")
        kinds = {(l.kind, l.attn_type) for l in self.layers}
        if (DECODER, CROSS) not in kinds:
            raise ConfigurationError("params must include a decoder cross-attention layer")
        if not any(t == SELF for (_, t) in kinds):
            raise ConfigurationError("params must include a self-attention layer")


def default_params(dim: int, height: int, width: int, seed: int = 0,
                   init_scale: float = 0.1) -> DenoiserParams:
    """Three-layer stack: encoder CA at full resolution, decoder CA and SA at
    half resolution. Weights are seeded uniform on [-init_scale, init_scale]."""
    if height % 2 or width % 2:
        raise ConfigurationError("latent extents must be even (decoder runs at half resolution)")
    rng = np.random.default_rng(seed)

    def mats():
        return [rng.uniform(-init_scale, init_scale, size=(dim, dim)) for _ in range(3)]

    specs = []
    for kind, attn_type, h, w in [
        (ENCODER, CROSS, height, width),
        (DECODER, CROSS, height // 2, width // 2),
        (DECODER, SELF, height // 2, width // 2),
    ]:
        wq, wk, wv = mats()
        specs.append(LayerSpec(kind, attn_type, h, w, wq, wk, wv))
    return DenoiserParams(dim, tuple(specs))


# ---------------------------------------------------------------------------
# Noise schedule and DDIM arithmetic
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal fractions abar_t, strictly decreasing in (0, 1]."""

    alphas_cumprod: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alphas_cumprod, dtype=np.float64)
        if a.ndim != 1 or a.size < 2:
            raise ShapeError("alphas_cumprod: need a 1-D array of length >= 2")
        if np.any(a <= 0.0) or np.any(a > 1.0):
            raise ValueError("alphas_cumprod: values must lie in (0, 1]")
        if np.any(np.diff(a) >= 0.0):
            raise ValueError("alphas_cumprod: must be strictly decreasing")
        a = a.copy()
        a.setflags(write=False)
        object.__setattr__(self, "alphas_cumprod", a)

    @property
    def total_steps(self) -> int:
        return self.alphas_cumprod.size

    def abar(self, t: int) -> float:
        if not 0 <= t < self.total_steps:
            raise ValueError(f"timestep {t} out of range [0, {self.total_steps})")
        return float(self.alphas_cumprod[t])


def toy_schedule(total_steps: int = 50, start: float = 0.9999, end: float = 0.02) -> NoiseSchedule:
    """Linear abar ramp used throughout the toy experiments."""
    return NoiseSchedule(np.linspace(start, end, total_steps))


def ddim_add_noise(z0: np.ndarray, eps: np.ndarray, t: int,
                   schedule: NoiseSchedule) -> np.ndarray:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 shape {z0.shape} != eps shape {eps.shape}")
    ab = schedule.abar(t)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def predict_clean(z_t: np.ndarray, eps_hat: np.ndarray, t: int,
                  schedule: NoiseSchedule) -> np.ndarray:
    """Invert the forward mix: zhat0 = (z_t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t)."""
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if z_t.shape != eps_hat.shape:
        raise ShapeError(f"z_t shape {z_t.shape} != eps_hat shape {eps_hat.shape}")
    ab = schedule.abar(t)
    return (z_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def ddim_step(z_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int,
              schedule: NoiseSchedule) -> np.ndarray:
    """One deterministic (eta = 0) sampling step from level t to t_prev."""
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be < t ({t})")
    zhat0 = predict_clean(z_t, eps_hat, t, schedule)
    ab_prev = schedule.abar(t_prev)
    return np.sqrt(ab_prev) * zhat0 + np.sqrt(1.0 - ab_prev) * eps_hat


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

@dataclass
class _LayerWork:
    """Mutable working copy of a LayerSpec for the training loops."""

    kind: str
    attn_type: str
    height: int
    width: int
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray


def workspace(params: DenoiserParams) -> "list[_LayerWork]":
    return [
        _LayerWork(l.kind, l.attn_type, l.height, l.width,
                   l.wq.copy(), l.wk.copy(), l.wv.copy())
        for l in params.layers
    ]


def params_from_workspace(dim: int, layers: "list[_LayerWork]") -> DenoiserParams:
    return DenoiserParams(dim, tuple(
        LayerSpec(l.kind, l.attn_type, l.height, l.width, l.wq, l.wk, l.wv)
        for l in layers
    ))


@dataclass
class LayerCache:
    work: _LayerWork
    x: np.ndarray      # pooled latent features, (n_l, d)
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray   # raw softmax output, (n_l, targets)
    out: np.ndarray    # attn @ v


@dataclass
class ForwardCache:
    """Everything the hand-written backward pass needs."""

    z: np.ndarray          # (H, W, d)
    emb: np.ndarray        # (n_tokens, d)
    layers: "list[LayerCache]" = field(default_factory=list)
    eps_hat: np.ndarray | None = None


def _blockmean(z: np.ndarray, h: int, w: int) -> np.ndarray:
    """Average-pool an (H, W, d) grid to (h*w, d); extents must divide."""
    H, W, d = z.shape
    if H % h or W % w:
        raise ShapeError(f"cannot pool {H}x{W} to {h}x{w}")
    bh, bw = H // h, W // w
    pooled = z.reshape(h, bh, w, bw, d).mean(axis=(1, 3))
    return pooled.reshape(h * w, d)


def _blockmean_adjoint(g: np.ndarray, h: int, w: int, H: int, W: int) -> np.ndarray:
    """Adjoint of _blockmean: spread each pooled gradient over its block."""
    d = g.shape[1]
    bh, bw = H // h, W // w
    g = g.reshape(h, 1, w, 1, d) / (bh * bw)
    return np.broadcast_to(g, (h, bh, w, bw, d)).reshape(H, W, d)


def _replicate(o: np.ndarray, h: int, w: int, H: int, W: int) -> np.ndarray:
    """Replicate an (h*w, d) layer output back onto the (H, W, d) grid."""
    d = o.shape[1]
    bh, bw = H // h, W // w
    o = o.reshape(h, 1, w, 1, d)
    return np.broadcast_to(o, (h, bh, w, bw, d)).reshape(H, W, d)


def _replicate_adjoint(g: np.ndarray, h: int, w: int) -> np.ndarray:
    """Adjoint of _replicate: sum the full-grid gradient over each block."""
    H, W, d = g.shape
    bh, bw = H // h, W // w
    return g.reshape(h, bh, w, bw, d).sum(axis=(1, 3)).reshape(h * w, d)


def forward_cache(z: np.ndarray, emb: np.ndarray,
                  layers: "list[_LayerWork]") -> ForwardCache:
    """Raw-array forward pass retaining per-layer intermediates."""
    H, W, d = z.shape
    cache = ForwardCache(z=z, emb=emb)
    acc = np.zeros_like(z)
    scale = 1.0 / np.sqrt(d)
    for work in layers:
        x = _blockmean(z, work.height, work.width)
        q = x @ work.wq
        if work.attn_type == CROSS:
            src = emb
        else:
            src = x
        k = src @ work.wk
        v = src @ work.wv
        logits = (q @ k.T) * scale
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        attn = e / e.sum(axis=1, keepdims=True)
        out = attn @ v
        cache.layers.append(LayerCache(work, x, q, k, v, attn, out))
        acc += _replicate(out, work.height, work.width, H, W)
    cache.eps_hat = acc / len(layers)
    return cache


def readout_eps(cache: ForwardCache, maps: "list[np.ndarray]") -> np.ndarray:
    """Recompute the noise prediction from (possibly modified) attention maps,
    reusing the cached values. Used after attention masking."""
    H, W, _ = cache.z.shape
    acc = np.zeros_like(cache.z)
    for lc, attn in zip(cache.layers, maps):
        out = attn @ lc.v
        acc += _replicate(out, lc.work.height, lc.work.width, H, W)
    return acc / len(cache.layers)


def record_from_maps(layers: "list[_LayerWork]",
                     maps: "list[np.ndarray]") -> AttentionRecord:
    return AttentionRecord(tuple(
        LayerAttention(w.kind, w.attn_type, w.height, w.width, AttentionMap(m))
        for w, m in zip(layers, maps)
    ))


def _token_matrix(tokens: "list[TokenEmbedding]", dim: int) -> np.ndarray:
    if not tokens:
        raise ConfigurationError("need at least one token embedding")
    ids = [t.token_id for t in tokens]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("duplicate token ids")
    for t in tokens:
        if t.vector.size != dim:
            raise ShapeError(
                f"token {t.token_id} has dim {t.vector.size}, params expect {dim}"
            )
    return np.stack([t.vector for t in tokens])


def forward_denoise(z, t: int, tokens: "list[TokenEmbedding]",
                    params: DenoiserParams,
                    schedule: NoiseSchedule | None = None):
    """Predict the noise in z and report every layer's attention map.

    Returns (eps_hat, AttentionRecord). The timestep is validated against the
    schedule when one is supplied; the toy model's output does not otherwise
    depend on it.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3:
        raise ShapeError(f"z: expected (H, W, channels), got {z.shape}")
    if z.shape[2] != params.dim:
        raise ShapeError(f"z channels {z.shape[2]} != params dim {params.dim}")
    if not np.all(np.isfinite(z)):
        raise ValueError("z: non-finite values")
    if schedule is not None:
        schedule.abar(t)  # range check
    elif t < 0:
        raise ValueError(f"timestep {t} must be >= 0")
    emb = _token_matrix(tokens, params.dim)
    cache = forward_cache(z, emb, workspace(params))
    record = record_from_maps([lc.work for lc in cache.layers],
                              [lc.attn for lc in cache.layers])
    return cache.eps_hat, record


# ---------------------------------------------------------------------------
# Structured-text serialization
# ---------------------------------------------------------------------------

def _matrix_lines(name: str, m: np.ndarray) -> "list[str]":
    lines = [f"{name} {m.shape[0]} {m.shape[1]}"]
    for row in m:
        lines.append(" ".join(fnum(v) for v in row))
    return lines


def _read_matrix(lines: "list[str]", pos: int, name: str):
    head = lines[pos].split()
    if len(head) != 3 or head[0] != name:
        raise ValueError(f"expected '{name} R C' header at line {pos + 1}, got {lines[pos]!r}")
    r, c = int(head[1]), int(head[2])
    rows = []
    for i in range(r):
        cells = lines[pos + 1 + i].split()
        if len(cells) != c:
            raise ValueError(f"matrix {name}: row {i} has {len(cells)} values, expected {c}")
        rows.append([float(x) for x in cells])
    return np.array(rows, dtype=np.float64), pos + 1 + r


def params_to_text(params: DenoiserParams) -> str:
    lines = ["denoiser-params v1", f"dim {params.dim}", f"layers {len(params.layers)}"]
    for i, l in enumerate(params.layers):
        lines.append(f"layer {i} {l.kind} {l.attn_type} {l.height} {l.width}")
        lines.extend(_matrix_lines("wq", l.wq))
        lines.extend(_matrix_lines("wk", l.wk))
        lines.extend(_matrix_lines("wv", l.wv))
    return "\n".join(lines) + "\n"


def params_from_text(text: str) -> DenoiserParams:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "denoiser-params v1":
        raise ValueError("not a denoiser-params v1 file")
    dim = int(lines[1].split()[1])
    n_layers = int(lines[2].split()[1])
    pos = 3
    specs = []
    for i in range(n_layers):
        head = lines[pos].split()
        if head[:2] != ["layer", str(i)]:
            raise ValueError(f"expected 'layer {i}' header, got {lines[pos]!r}")
        kind, attn_type = head[2], head[3]
        h, w = int(head[4]), int(head[5])
        pos += 1
        wq, pos = _read_matrix(lines, pos, "wq")
        wk, pos = _read_matrix(lines, pos, "wk")
        wv, pos = _read_matrix(lines, pos, "wv")
        specs.append(LayerSpec(kind, attn_type, h, w, wq, wk, wv))
    return DenoiserParams(dim, tuple(specs))


def save_params(params: DenoiserParams, path: str) -> None:
    atomic_write_text(path, params_to_text(params))


def load_params(path: str) -> DenoiserParams:
    with open(path) as fh:
        return params_from_text(fh.read())


def tokens_to_text(tokens: "list[TokenEmbedding]") -> str:
    if not tokens:
        raise ConfigurationError("no tokens to serialize")
    dim = tokens[0].vector.size
    lines = ["token-embeddings v1", f"dim {dim}", f"count {len(tokens)}"]
    for t in tokens:
        tag = "learnable" if t.learnable else "fixed"
        lines.append(f"token {t.token_id} {tag}")
        lines.append(" ".join(fnum(v) for v in t.vector))
    return "\n".join(lines) + "\n"


def tokens_from_text(text: str) -> "list[TokenEmbedding]":
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "token-embeddings v1":
        raise ValueError("not a token-embeddings v1 file")
    dim = int(lines[1].split()[1])
    count = int(lines[2].split()[1])
    tokens = []
    pos = 3
    for _ in range(count):
        head = lines[pos].split()
        if head[0] != "token" or head[2] not in ("learnable", "fixed"):
            raise ValueError(f"bad token header {lines[pos]!r}")
        vec = np.array([float(x) for x in lines[pos + 1].split()], dtype=np.float64)
        if vec.size != dim:
            raise ValueError(f"token {head[1]}: expected {dim} values, got {vec.size}")
        tokens.append(TokenEmbedding(int(head[1]), vec, head[2] == "learnable"))
        pos += 2
    return tokens


def save_tokens(tokens: "list[TokenEmbedding]", path: str) -> None:
    atomic_write_text(path, tokens_to_text(tokens))


def load_tokens(path: str) -> "list[TokenEmbedding]":
    with open(path) as fh:
        return tokens_from_text(fh.read())
