"""Next-item scorer built around generated (or dot-product) attention."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import generators as gen
from .encoder import EncodedSequence, embed_sequence, encode_sequence, init_embedding_params, init_encoder_params, uniform
from .tensor import RngStream, Tensor, dropout, layer_norm, matmul, tanh

MODES = ("deterministic", "vae", "diffusion")


class ContractError(ValueError):
    pass


class SchemaError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_items: int = 0
    d: int = 64
    n: int = 50
    L: int = 2
    H: int = 2
    d_h: int = 0  # 0 -> 2 * d
    T: int = 0  # 0 -> n
    beta_start: float = 1e-4
    beta_end: float = 0.02
    gamma: float = 1.0
    dropout: float = 0.4
    mode: str = "vae"
    seed: int = 0
    dtype: str = "float64"
    d_t: int = 16  # width of the step / row-index embeddings
    diff_hidden: int = 0  # 0 -> d_h

    def __post_init__(self):
        if self.d_h <= 0:
            self.d_h = 2 * self.d
        if self.T <= 0:
            self.T = self.n
        if self.diff_hidden <= 0:
            self.diff_hidden = self.d_h
        if self.mode not in MODES:
            raise gen.ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.dtype not in ("float64", "float32"):
            raise gen.ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if min(self.d, self.n, self.L, self.H) < 1:
            raise gen.ConfigError("d, n, L and H must all be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise gen.ConfigError("dropout must lie in [0, 1)")
        if self.gamma < 0:
            raise gen.ConfigError("gamma must be non-negative")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class ForwardOutput:
    hidden: Tensor  # (B, n, d)
    attention: list[gen.GenAttention]  # one per layer, normalized (B, H, n, n)
    encoded: EncodedSequence
    generated: gen.GenAttention | None = None  # full (B, L, H, n, n) stack
    scores: Tensor | None = None  # (B, num_items); column j is item j + 1


def causal_rows_ok(A: np.ndarray, atol: float = 1e-6) -> bool:
    n = A.shape[-1]
    allowed = gen.causal_mask(n)
    if np.any(A[..., ~allowed] != 0.0):
        return False
    return bool(np.allclose(A.sum(axis=-1), 1.0, atol=atol))


def apply_generated_attention(A, X: Tensor, rate: float = 0.0, rng: RngStream | None = None, training: bool = False) -> Tensor:
    """Average over heads of A_h @ X; no value projection.

    ``A`` is a normalized (B, H, n, n) tensor or a GenAttention for one layer.
    Attention dropout, if any, is applied after the normalization check.
    """
    if isinstance(A, gen.GenAttention):
        A = A.normalized
    if A.shape[-1] != X.shape[1] or A.shape[0] != X.shape[0]:
        raise ContractError(f"attention {A.shape} does not fit input {X.shape}")
    if not causal_rows_ok(A.data):
        raise ContractError("attention weights are not causally row-normalized")
    A = dropout(A, rate, rng, training)
    heads = matmul(A, X.reshape(X.shape[0], 1, *X.shape[1:]))  # (B, H, n, d)
    return heads.mean(axis=1)


def gelu(x: Tensor) -> Tensor:
    c = math.sqrt(2.0 / math.pi)
    return x * 0.5 * (tanh((x + x * x * x * 0.044715) * c) + 1.0)


def pointwise_ffn(X: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    h = gelu(matmul(X, params[prefix + "ffn.W1"]) + params[prefix + "ffn.b1"])
    return matmul(h, params[prefix + "ffn.W2"]) + params[prefix + "ffn.b2"]


def transformer_block(
    X: Tensor,
    A: Tensor,
    params: dict[str, Tensor],
    layer: int,
    rate: float = 0.0,
    rng: RngStream | None = None,
    training: bool = False,
) -> Tensor:
    p = f"block{layer}."
    att = apply_generated_attention(A, X, rate, rng, training)
    Y = layer_norm(X + dropout(att, rate, rng, training), params[p + "ln1.g"], params[p + "ln1.b"])
    F = pointwise_ffn(Y, params, p)
    return layer_norm(Y + dropout(F, rate, rng, training), params[p + "ln2.g"], params[p + "ln2.b"])


def score_items(h_last: Tensor, item_table: Tensor) -> Tensor:
    """Dot products against item rows 1..|V|; the pad row is never scored."""
    return matmul(h_last, item_table[1:].transpose())


class GenAttModel:
    """Embeddings, GRU encoder, attention generator and L blocks.

    ``collapse`` pins the VAE latent to its mean (sigma = 0), which turns the
    generator into a deterministic map of the input.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.collapse = False
        self.params = params if params is not None else self._init_params()
        self.schedule = gen.build_schedule(config.T, config.beta_start, config.beta_end) if config.mode == "diffusion" else None

    def _init_params(self) -> dict[str, Tensor]:
        c = self.config
        dt = c.np_dtype
        rng = RngStream(c.seed).fork(1)
        params = {}
        params.update(init_embedding_params(rng, c.num_items, c.n, c.d, dt))
        params.update(init_encoder_params(rng, c.d, c.d_h, dt))
        for layer in range(c.L):
            p = f"block{layer}."
            if c.mode == "deterministic":
                b = 1.0 / math.sqrt(c.d)
                params[p + "Wq"] = uniform(rng, (c.H, c.d, c.d), b, dt)
                params[p + "Wk"] = uniform(rng, (c.H, c.d, c.d), b, dt)
            params[p + "ffn.W1"] = uniform(rng, (c.d, 4 * c.d), 1.0 / math.sqrt(c.d), dt)
            params[p + "ffn.b1"] = Tensor(np.zeros(4 * c.d, dt), requires_grad=True)
            params[p + "ffn.W2"] = uniform(rng, (4 * c.d, c.d), 1.0 / math.sqrt(4 * c.d), dt)
            params[p + "ffn.b2"] = Tensor(np.zeros(c.d, dt), requires_grad=True)
            for ln in ("ln1", "ln2"):
                params[p + ln + ".g"] = Tensor(np.ones(c.d, dt), requires_grad=True)
                params[p + ln + ".b"] = Tensor(np.zeros(c.d, dt), requires_grad=True)
        if c.mode == "vae":
            params.update(gen.init_vae_params(rng, c.d_h, c.n, c.L, c.H, dt))
        elif c.mode == "diffusion":
            params.update(gen.init_diffusion_params(rng, c.d_h, c.n, c.L, c.H, c.d_t, c.diff_hidden, dt))
        return params

    # -- forward --------------------------------------------------------
    def generate(self, encoded: EncodedSequence, rng: RngStream | None) -> gen.GenAttention | None:
        """Attention stack conditioned row-wise on the encoder states."""
        c = self.config
        if c.mode == "vae":
            return gen.vae_generate(encoded.S, self.params, rng, collapse=self.collapse)
        if c.mode == "diffusion":
            if rng is None:
                raise ValueError("diffusion mode needs an RngStream")
            return gen.generate_attention_diffusion(encoded.S, self.schedule, self.params, rng, c.L, c.H, c.d_t)
        return None

    def forward(self, items: np.ndarray, rng: RngStream | None = None, training: bool = False, score: bool = True) -> ForwardOutput:
        c = self.config
        items = np.asarray(items)
        if items.ndim != 2 or items.shape[1] != c.n:
            raise ContractError(f"expected item batch of shape (B, {c.n}), got {items.shape}")
        mask = items > 0
        M = embed_sequence(items, self.params)
        encoded = encode_sequence(M, mask, self.params)
        noise_rng = rng.fork(101) if rng is not None else None
        drop_rng = rng.fork(202) if (rng is not None and training) else None
        generated = self.generate(encoded, noise_rng)

        X = dropout(M, c.dropout, drop_rng, training)
        attention = []
        for layer in range(c.L):
            if generated is None:
                p = f"block{layer}."
                Xh = X.reshape(X.shape[0], 1, c.n, c.d)
                A = gen.deterministic_attention(matmul(Xh, self.params[p + "Wq"]), matmul(Xh, self.params[p + "Wk"]), mask=True)
            else:
                A = gen.GenAttention(generated.logits[:, layer], generated.normalized[:, layer])
            attention.append(A)
            X = transformer_block(X, A.normalized, self.params, layer, c.dropout, drop_rng, training)
        out = ForwardOutput(hidden=X, attention=attention, encoded=encoded, generated=generated)
        if score:
            out.scores = score_items(X[:, -1], self.params["item_table"])
        return out

    # -- parameter housekeeping ---------------------------------------------
    def zero_pad_grad(self) -> None:
        g = self.params["item_table"].grad
        if g is not None:
            g[0] = 0.0

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


# ---------------------------------------------------------------------------
# checkpoints: manifest.json (config + tensor index) and params.bin (raw LE bytes)


def save_checkpoint(model: GenAttModel, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    with open(path / "params.bin", "wb") as fh:
        for name in sorted(model.params):
            arr = np.ascontiguousarray(model.params[name].data)
            raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            fh.write(raw)
            index.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name, "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"format": "genatt-checkpoint/1", "config": asdict(model.config), "tensors": index}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path, expect: ModelConfig | None = None) -> GenAttModel:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"no checkpoint manifest under {path}") from None
    known = {f.name for f in fields(ModelConfig)}
    cfg_raw = manifest.get("config", {})
    unknown = set(cfg_raw) - known
    if unknown:
        raise SchemaError(f"checkpoint config has unknown keys {sorted(unknown)}")
    config = ModelConfig(**cfg_raw)
    if expect is not None:
        for key in ("num_items", "d", "n", "L", "H", "d_h", "mode"):
            if getattr(expect, key) != getattr(config, key):
                raise SchemaError(f"checkpoint {key}={getattr(config, key)!r} but run config has {getattr(expect, key)!r}")
    blob = (path / "params.bin").read_bytes()
    params = {}
    for entry in manifest["tensors"]:
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        arr = np.frombuffer(blob, dtype=dt, count=math.prod(entry["shape"]) if entry["shape"] else 1, offset=entry["offset"])
        params[entry["name"]] = Tensor(arr.reshape(entry["shape"]).astype(entry["dtype"]), requires_grad=True)
    return GenAttModel(config, params)
