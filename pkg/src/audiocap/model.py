"""Sequence-to-sequence captioner with temporal sub-sampling in the encoder.

Encoder: ``num_layers`` bi-directional GRU layers. Between consecutive layers the
latent sequence is decimated by ``subsample_factor`` (keeping rows 0, M, 2M, ...),
passed through dropout, and the next layer's output is added to its (decimated)
input as a residual. The context vector is the last row of the final layer.

Decoder: a GRU fed the context vector at every step, followed by an affine
classifier and a softmax over the vocabulary.

All array functions accept a leading batch axis. Gradients are computed by
explicit backpropagation through time.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, DimensionError, SequenceTooShort
from .numcore import (
    ParamStore,
    affine,
    affine_backward,
    dropout_mask,
    make_rng,
    sequence_loss,
    sigmoid,
    softmax,
)

log = logging.getLogger(__name__)

EVALUATED_FACTORS = (1, 2, 4, 8, 16)
GATES = 3  # reset, update, candidate


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 3
    encoder_size: int = 256  # per direction; concatenated width is twice this
    decoder_size: int = 256
    subsample_factor: int = 1
    num_features: int = 64
    vocab_size: int = 4366
    dropout_p: float = 0.25
    max_decode_steps: int = 22

    def __post_init__(self):
        if self.num_layers < 2:
            raise ConfigurationError(f"num_layers must be >= 2, got {self.num_layers}")
        for name in ("encoder_size", "decoder_size", "subsample_factor", "num_features",
                     "vocab_size", "max_decode_steps"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.subsample_factor not in EVALUATED_FACTORS:
            log.warning("sub-sampling factor %d is outside the evaluated grid %s",
                        self.subsample_factor, EVALUATED_FACTORS)

    @property
    def context_size(self) -> int:
        return 2 * self.encoder_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class GruParams(NamedTuple):
    W_x: np.ndarray  # (I, 3H), gate blocks ordered reset|update|candidate
    W_h: np.ndarray  # (H, 3H)
    b_x: np.ndarray  # (3H,)
    b_h: np.ndarray  # (3H,)

    @property
    def hidden_size(self) -> int:
        return self.W_h.shape[0]


def gru_param_shapes(input_size: int, hidden_size: int) -> dict[str, tuple[int, ...]]:
    return {
        "W_x": (input_size, GATES * hidden_size),
        "W_h": (hidden_size, GATES * hidden_size),
        "b_x": (GATES * hidden_size,),
        "b_h": (GATES * hidden_size,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter tensor of the model, in storage order."""
    shapes: dict[str, tuple[int, ...]] = {}
    for layer in range(1, cfg.num_layers + 1):
        in_size = cfg.num_features if layer == 1 else cfg.context_size
        for direction in ("fwd", "bwd"):
            for k, s in gru_param_shapes(in_size, cfg.encoder_size).items():
                shapes[f"enc.{layer}.{direction}.{k}"] = s
    for k, s in gru_param_shapes(cfg.context_size, cfg.decoder_size).items():
        shapes[f"dec.{k}"] = s
    shapes["cls.W"] = (cfg.decoder_size, cfg.vocab_size)
    shapes["cls.b"] = (cfg.vocab_size,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) for every tensor, H the owning layer's hidden size."""
    rng = make_rng(seed, 0)
    store = ParamStore()
    for name, shape in param_shapes(cfg).items():
        if name.startswith("enc."):
            k = 1.0 / np.sqrt(cfg.encoder_size)
        else:
            k = 1.0 / np.sqrt(cfg.decoder_size)
        store.add(name, rng.uniform(-k, k, size=shape))
    return store


def gru(params: ParamStore, prefix: str) -> GruParams:
    return GruParams(*(params[f"{prefix}.{k}"] for k in ("W_x", "W_h", "b_x", "b_h")))


def _accumulate_gru(params: ParamStore, prefix: str, grads) -> None:
    for k, g in zip(("W_x", "W_h", "b_x", "b_h"), grads):
        params.accumulate(f"{prefix}.{k}", g)


# GRU cell -------------------------------------------------------------------

def gru_step(x_t, h_prev, p: GruParams) -> np.ndarray:
    """One GRU update: ``h = (1 - u) * n + u * h_prev``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    H = p.hidden_size
    if x_t.shape[-1] != p.W_x.shape[0] or h_prev.shape[-1] != H:
        raise DimensionError(
            f"gru_step: input width {x_t.shape[-1]} / state width {h_prev.shape[-1]} "
            f"do not match parameters ({p.W_x.shape[0]}, {H})"
        )
    gx = x_t @ p.W_x + p.b_x
    gh = h_prev @ p.W_h + p.b_h
    r = sigmoid(gx[..., :H] + gh[..., :H])
    u = sigmoid(gx[..., H:2 * H] + gh[..., H:2 * H])
    n = np.tanh(gx[..., 2 * H:] + r * gh[..., 2 * H:])
    return (1.0 - u) * n + u * h_prev


def _gru_scan(gx: np.ndarray, W_h: np.ndarray, b_h: np.ndarray, keep_cache: bool = True):
    """Run the recurrence over precomputed input projections ``gx`` (B, T, 3H)."""
    B, T, _ = gx.shape
    H = W_h.shape[0]
    h = np.zeros((B, H))
    hs = np.empty((B, T, H))
    if not keep_cache:
        for t in range(T):
            gh = h @ W_h + b_h
            g = gx[:, t]
            ru = sigmoid(g[:, :2 * H] + gh[:, :2 * H])
            r, u = ru[:, :H], ru[:, H:]
            n = np.tanh(g[:, 2 * H:] + r * gh[:, 2 * H:])
            h = (1.0 - u) * n + u * h
            hs[:, t] = h
        return hs, None
    h_prev = np.empty((B, T, H))
    r_all = np.empty((B, T, H))
    u_all = np.empty((B, T, H))
    n_all = np.empty((B, T, H))
    ghn_all = np.empty((B, T, H))
    for t in range(T):
        gh = h @ W_h + b_h
        g = gx[:, t]
        ru = sigmoid(g[:, :2 * H] + gh[:, :2 * H])
        r, u = ru[:, :H], ru[:, H:]
        n = np.tanh(g[:, 2 * H:] + r * gh[:, 2 * H:])
        h_prev[:, t] = h
        h = (1.0 - u) * n + u * h
        hs[:, t] = h
        r_all[:, t], u_all[:, t], n_all[:, t], ghn_all[:, t] = r, u, n, gh[:, 2 * H:]
    return hs, (h_prev, r_all, u_all, n_all, ghn_all)


def _gru_scan_backward(dhs: np.ndarray, cache, W_h: np.ndarray):
    h_prev, r_all, u_all, n_all, ghn_all = cache
    B, T, H = dhs.shape
    dgx = np.empty((B, T, GATES * H))
    dgh_all = np.empty((B, T, GATES * H))
    dh_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        dh = dhs[:, t] + dh_next
        r, u, n = r_all[:, t], u_all[:, t], n_all[:, t]
        du = dh * (h_prev[:, t] - n)
        dan = dh * (1.0 - u) * (1.0 - n * n)
        dar = dan * ghn_all[:, t] * r * (1.0 - r)
        dau = du * u * (1.0 - u)
        dgx[:, t, :H] = dar
        dgx[:, t, H:2 * H] = dau
        dgx[:, t, 2 * H:] = dan
        dgh = dgh_all[:, t]
        dgh[:, :H] = dar
        dgh[:, H:2 * H] = dau
        dgh[:, 2 * H:] = dan * r
        dh_next = dh * u + dgh @ W_h.T
    hp = h_prev.reshape(-1, H)
    d2 = dgh_all.reshape(-1, GATES * H)
    return dgx, hp.T @ d2, d2.sum(axis=0)


def _gru_layer_forward(X: np.ndarray, p: GruParams, keep_cache: bool = True):
    gx = affine(X, p.W_x, p.b_x)
    hs, cache = _gru_scan(gx, p.W_h, p.b_h, keep_cache)
    return hs, (X, cache)


def _gru_layer_backward(dhs: np.ndarray, cache, p: GruParams):
    X, scan_cache = cache
    dgx, dW_h, db_h = _gru_scan_backward(dhs, scan_cache, p.W_h)
    dX, dW_x, db_x = affine_backward(X, p.W_x, dgx)
    return dX, (dW_x, dW_h, db_x, db_h)


# Encoder ----------------------------------------------------------------------

def _as_batch(X) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        return X[None], True
    if X.ndim != 3:
        raise DimensionError(f"expected a (T, W) or (B, T, W) sequence, got shape {X.shape}")
    return X, False


def _bidir_forward(X: np.ndarray, fwd: GruParams, bwd: GruParams, keep_cache: bool = True):
    if X.shape[1] < 1:
        raise DimensionError("bidirectional layer needs a non-empty sequence")
    for p in (fwd, bwd):
        if X.shape[-1] != p.W_x.shape[0]:
            raise DimensionError(
                f"input width {X.shape[-1]} does not match parameter input width {p.W_x.shape[0]}"
            )
    hf, cf = _gru_layer_forward(X, fwd, keep_cache)
    hb, cb = _gru_layer_forward(X[:, ::-1], bwd, keep_cache)
    return np.concatenate([hf, hb[:, ::-1]], axis=-1), (cf, cb)


def _bidir_backward(dH: np.ndarray, cache, fwd: GruParams, bwd: GruParams):
    cf, cb = cache
    H = fwd.hidden_size
    dXf, gf = _gru_layer_backward(dH[..., :H], cf, fwd)
    dXb, gb = _gru_layer_backward(dH[:, ::-1, H:], cb, bwd)
    return dXf + dXb[:, ::-1], gf, gb


def bidir_layer(H_in, fwd: GruParams, bwd: GruParams) -> np.ndarray:
    """Forward GRU over time, backward GRU over reversed time, outputs concatenated per step."""
    X, single = _as_batch(H_in)
    out, _ = _bidir_forward(X, fwd, bwd, keep_cache=False)
    return out[0] if single else out


def subsampled_length(T: int, factor: int) -> int:
    return T // factor


def subsample(H, factor: int) -> np.ndarray:
    """Keep time rows 0, M, 2M, ... (floor(T/M) rows) along the time axis (-2)."""
    H = np.asarray(H)
    if factor < 1:
        raise ConfigurationError(f"sub-sampling factor must be >= 1, got {factor}")
    T = H.shape[-2]
    keep = T // factor
    if keep < 1:
        raise SequenceTooShort(T, factor)
    return H[..., 0:keep * factor:factor, :]


def final_length(T: int, factor: int, num_layers: int) -> int:
    """Length of the last encoder layer's output: floor(./M) applied num_layers-1 times."""
    for _ in range(num_layers - 1):
        T //= factor
    return T


def min_input_length(cfg: ModelConfig) -> int:
    return cfg.subsample_factor ** (cfg.num_layers - 1)


def _encoder_forward(X: np.ndarray, params: ParamStore, cfg: ModelConfig,
                     training: bool, rng: np.random.Generator | None, keep_cache: bool = True):
    if X.shape[-1] != cfg.num_features:
        raise DimensionError(f"expected {cfg.num_features} features, got {X.shape[-1]}")
    caches = []
    H, c = _bidir_forward(X, gru(params, "enc.1.fwd"), gru(params, "enc.1.bwd"), keep_cache)
    caches.append((c, None, None))
    for layer in range(2, cfg.num_layers + 1):
        T_prev = H.shape[1]
        Hs = subsample(H, cfg.subsample_factor)
        mask = None
        if training and cfg.dropout_p > 0.0:
            if rng is None:
                raise ConfigurationError("training-mode dropout needs a random generator")
            mask = dropout_mask(Hs.shape, cfg.dropout_p, rng)
            Hs = Hs * mask
        Hp, c = _bidir_forward(Hs, gru(params, f"enc.{layer}.fwd"), gru(params, f"enc.{layer}.bwd"),
                               keep_cache)
        H = Hp + Hs
        caches.append((c, mask, T_prev))
    return H[:, -1], H.shape[1], caches


def _encoder_backward(dz: np.ndarray, caches, params: ParamStore, cfg: ModelConfig) -> None:
    B = dz.shape[0]
    dH = None
    for layer in range(cfg.num_layers, 0, -1):
        c, mask, T_prev = caches[layer - 1]
        fwd, bwd = gru(params, f"enc.{layer}.fwd"), gru(params, f"enc.{layer}.bwd")
        if dH is None:
            T_l = c[0][0].shape[1]
            dH = np.zeros((B, T_l, cfg.context_size))
            dH[:, -1] = dz
        dX, gf, gb = _bidir_backward(dH, c, fwd, bwd)
        _accumulate_gru(params, f"enc.{layer}.fwd", gf)
        _accumulate_gru(params, f"enc.{layer}.bwd", gb)
        if layer == 1:
            break
        dHs = dX + dH  # residual path
        if mask is not None:
            dHs = dHs * mask
        M = cfg.subsample_factor
        dH = np.zeros((B, T_prev, cfg.context_size))
        dH[:, 0:dHs.shape[1] * M:M] = dHs


def encode(X, params: ParamStore, cfg: ModelConfig, training: bool = False,
           rng: np.random.Generator | None = None):
    """Returns ``(z, T_L)``; z has shape (2*encoder_size,) or (B, 2*encoder_size)."""
    Xb, single = _as_batch(X)
    z, T_L, _ = _encoder_forward(Xb, params, cfg, training, rng, keep_cache=False)
    return (z[0] if single else z), T_L


def encoder_hidden_sequences(X, params: ParamStore, cfg: ModelConfig) -> list[np.ndarray]:
    """Inference-mode outputs of every encoder layer, for inspection."""
    Xb, single = _as_batch(X)
    outs = []
    H = _bidir_forward(Xb, gru(params, "enc.1.fwd"), gru(params, "enc.1.bwd"), keep_cache=False)[0]
    outs.append(H)
    for layer in range(2, cfg.num_layers + 1):
        Hs = subsample(H, cfg.subsample_factor)
        H = _bidir_forward(Hs, gru(params, f"enc.{layer}.fwd"), gru(params, f"enc.{layer}.bwd"),
                           keep_cache=False)[0] + Hs
        outs.append(H)
    return [o[0] for o in outs] if single else outs


# Decoder ----------------------------------------------------------------------

@dataclass
class DecoderState:
    u: np.ndarray
    step: int = 0

    @classmethod
    def initial(cls, cfg: ModelConfig, batch: int | None = None) -> "DecoderState":
        shape = (cfg.decoder_size,) if batch is None else (batch, cfg.decoder_size)
        return cls(np.zeros(shape), 0)


def decode_step(z, state: DecoderState, params: ParamStore):
    """Returns ``(yhat, next_state)``: one decoder GRU update on z, then the classifier."""
    u = gru_step(z, state.u, gru(params, "dec"))
    yhat = softmax(affine(u, params["cls.W"], params["cls.b"]))
    return yhat, DecoderState(u, state.step + 1)


def greedy_decode(z, params: ParamStore, cfg: ModelConfig, eos_index: int) -> list[int]:
    """Argmax decoding (ties -> lowest index) until eos or ``max_decode_steps``.

    When the step cap is reached without eos, eos is appended.
    """
    state = DecoderState.initial(cfg)
    z = np.asarray(z, dtype=np.float64)
    out: list[int] = []
    for _ in range(cfg.max_decode_steps):
        yhat, state = decode_step(z, state, params)
        k = int(np.argmax(yhat))
        out.append(k)
        if k == eos_index:
            return out
    out.append(eos_index)
    return out


def _decoder_forward(z: np.ndarray, steps: int, params: ParamStore, keep_cache: bool = True):
    p = gru(params, "dec")
    gz = affine(z, p.W_x, p.b_x)
    gx = np.broadcast_to(gz[:, None, :], (z.shape[0], steps, gz.shape[-1]))
    U, cache = _gru_scan(gx, p.W_h, p.b_h, keep_cache)
    logits = affine(U, params["cls.W"], params["cls.b"])
    return logits, (z, U, cache)


def _decoder_backward(dlogits: np.ndarray, cache, params: ParamStore) -> np.ndarray:
    z, U, scan_cache = cache
    dU, dW, db = affine_backward(U, params["cls.W"], dlogits)
    params.accumulate("cls.W", dW)
    params.accumulate("cls.b", db)
    p = gru(params, "dec")
    dgx, dW_h, db_h = _gru_scan_backward(dU, scan_cache, p.W_h)
    dgz = dgx.sum(axis=1)
    dz, dW_x, db_x = affine_backward(z, p.W_x, dgz)
    _accumulate_gru(params, "dec", (dW_x, dW_h, db_x, db_h))
    return dz


# Loss -------------------------------------------------------------------------

def batch_loss(features: np.ndarray, targets: np.ndarray, phi: np.ndarray,
               params: ParamStore, cfg: ModelConfig, *, training: bool = False,
               rng: np.random.Generator | None = None, mode: str = "categorical",
               mask: np.ndarray | None = None, compute_grad: bool = True) -> float:
    """Mean over items of the per-position-averaged weighted cross-entropy.

    features (B, T, F), targets (B, S) int, phi (B, S). When ``compute_grad`` is
    set the gradients are accumulated into ``params``.
    """
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets)
    if targets.ndim != 2 or targets.shape[0] != features.shape[0] or targets.shape[1] < 1:
        raise DimensionError(
            f"targets shape {targets.shape} does not match a batch of {features.shape[0]}"
        )
    z, _, enc_cache = _encoder_forward(features, params, cfg, training, rng, compute_grad)
    logits, dec_cache = _decoder_forward(z, targets.shape[1], params, compute_grad)
    loss, dlogits, _ = sequence_loss(logits, targets, np.asarray(phi, dtype=np.float64), mode, mask)
    if compute_grad:
        dz = _decoder_backward(dlogits, dec_cache, params)
        _encoder_backward(dz, enc_cache, params, cfg)
    return loss


def forward_loss(X, Y, params: ParamStore, cfg: ModelConfig, weights, *,
                 training: bool = False, rng: np.random.Generator | None = None,
                 mode: str = "categorical", compute_grad: bool = True) -> float:
    """Loss of one example; ``weights`` maps token index to its loss weight."""
    Y = list(Y)
    if not Y:
        raise DimensionError("target sequence must be non-empty")
    X = np.asarray(X, dtype=np.float64)[None]
    phi = np.array([[weights[y] for y in Y]], dtype=np.float64)
    return batch_loss(X, np.array([Y]), phi, params, cfg, training=training, rng=rng,
                      mode=mode, compute_grad=compute_grad)
