"""Decoder and encoder MLPs plus the reconstruction losses.

The decoder maps a latent vector through four (by default) linear layers of
gradually increasing width with ELU in between, ending in a sigmoid so
outputs are per-pixel probabilities.  The encoder mirrors the decoder with
the widths reversed and no squashing on the latent.  A one-layer decoder
with ``output_mode="identity"`` degenerates to D(z) = Az + b, which the
linear-flow test oracles rely on.
"""

from __future__ import annotations

import json
from enum import Enum

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

CHECKPOINT_VERSION = 1


class LossKind(Enum):
    CROSS_ENTROPY = "cross_entropy"
    L2 = "l2"


class MLPParams:
    """Ordered (weight, bias) pairs for a stack of linear layers."""

    def __init__(self, weights: list[Tensor], biases: list[Tensor],
                 widths: list[int], output_mode: str = "sigmoid"):
        if len(weights) != len(biases) or len(weights) != len(widths) - 1:
            raise ValueError("layer count mismatch between weights, biases, widths")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (widths[i + 1], widths[i]) or b.shape != (widths[i + 1],):
                raise ValueError(
                    f"layer {i}: weight {w.shape} / bias {b.shape} do not match "
                    f"widths {widths[i]}->{widths[i + 1]}")
        if output_mode not in ("sigmoid", "identity"):
            raise ValueError(f"unknown output_mode {output_mode!r}")
        self.weights = weights
        self.biases = biases
        self.widths = list(widths)
        self.output_mode = output_mode

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def tensors(self) -> list[Tensor]:
        """Flat parameter list, alternating weight, bias per layer."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def count(self) -> int:
        return sum(t.size for t in self.tensors())

    def replace_tensors(self, new: list[Tensor]) -> None:
        """Swap in updated parameters (tensors stay immutable values)."""
        if len(new) != 2 * self.n_layers:
            raise ValueError("wrong number of parameter tensors")
        self.weights = [new[2 * i] for i in range(self.n_layers)]
        self.biases = [new[2 * i + 1] for i in range(self.n_layers)]

    def copy(self) -> "MLPParams":
        return type(self)(
            [Tensor(w.data.copy(), requires_grad=True) for w in self.weights],
            [Tensor(b.data.copy(), requires_grad=True) for b in self.biases],
            self.widths, self.output_mode)


class DecoderParams(MLPParams):
    """Decoder parameters; widths must be non-decreasing latent -> output."""

    def __init__(self, weights, biases, widths, output_mode="sigmoid"):
        for a, b in zip(widths, widths[1:]):
            if b < a:
                raise ValueError(f"decoder widths must not decrease, got {widths}")
        super().__init__(weights, biases, widths, output_mode)

    @property
    def latent_dim(self) -> int:
        return self.widths[0]

    @property
    def output_dim(self) -> int:
        return self.widths[-1]


class EncoderParams(MLPParams):
    """Encoder parameters; widths are the exact reverse of the decoder's."""

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def latent_dim(self) -> int:
        return self.widths[-1]

    def matches_decoder(self, decoder: DecoderParams) -> bool:
        return self.widths == list(reversed(decoder.widths))


DEFAULT_WIDTHS = [16, 64, 128, 256, 784]


def _init_layers(widths: list[int], rng: np.random.Generator):
    weights, biases = [], []
    for fan_in, fan_out in zip(widths, widths[1:]):
        bound = np.sqrt(3.0 / fan_in)
        weights.append(Tensor(rng.uniform(-bound, bound, size=(fan_out, fan_in)),
                              requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return weights, biases


def init_decoder(widths: list[int] | None = None,
                 rng: np.random.Generator | None = None,
                 output_mode: str = "sigmoid") -> DecoderParams:
    """Fan-in-scaled uniform init; rng must be seeded by the caller."""
    widths = list(widths) if widths is not None else list(DEFAULT_WIDTHS)
    rng = rng if rng is not None else np.random.default_rng(0)
    w, b = _init_layers(widths, rng)
    return DecoderParams(w, b, widths, output_mode)


def init_encoder(decoder: DecoderParams,
                 rng: np.random.Generator | None = None) -> EncoderParams:
    """Encoder mirroring ``decoder`` with reversed widths."""
    widths = list(reversed(decoder.widths))
    rng = rng if rng is not None else np.random.default_rng(0)
    w, b = _init_layers(widths, rng)
    return EncoderParams(w, b, widths, output_mode="identity")


def _forward(params: MLPParams, x: Tensor) -> Tensor:
    h = x
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = dc.affine(w, h, b)
        if i < last:
            h = dc.elu(h)
    return h


def decode_logits(z: Tensor, decoder: DecoderParams) -> Tensor:
    """Pre-squash decoder output; the numerically safe handle for CE."""
    if z.shape != (decoder.latent_dim,):
        raise dc.ShapeError(
            f"decode: latent {z.shape} vs expected ({decoder.latent_dim},)")
    return _forward(decoder, z)


def decode(z: Tensor, decoder: DecoderParams) -> Tensor:
    """Reconstruction from a latent; sigmoid-squashed unless identity mode."""
    logits = decode_logits(z, decoder)
    if decoder.output_mode == "sigmoid":
        return dc.sigmoid(logits)
    return logits


def encode(y: Tensor, encoder: EncoderParams) -> Tensor:
    """Latent from an input; no squashing on the output."""
    if y.shape != (encoder.input_dim,):
        raise dc.ShapeError(
            f"encode: input {y.shape} vs expected ({encoder.input_dim},)")
    return _forward(encoder, y)


_CLIP = 1e-12


def loss(y: Tensor, yhat: Tensor, kind: LossKind) -> Tensor:
    """Distance between a sample and its reconstruction.

    L2 is the squared norm sum((yhat - y)^2).  Cross-entropy is the mean
    per-pixel Bernoulli cross-entropy and requires targets in [0, 1];
    predictions are clipped away from {0, 1} before the logs.
    """
    y = dc._as_tensor(y)
    yhat = dc._as_tensor(yhat)
    if y.shape != yhat.shape:
        raise dc.ShapeError(f"loss: target {y.shape} vs prediction {yhat.shape}")
    if kind == LossKind.L2:
        d = dc.sub(yhat, y)
        return dc.dot(d, d)
    if np.any(y.data < 0.0) or np.any(y.data > 1.0):
        raise ValueError("cross-entropy targets must lie in [0, 1]")
    p = dc.select(yhat.data < _CLIP, dc.constant(np.full(yhat.shape, _CLIP)), yhat)
    p = dc.select(p.data > 1.0 - _CLIP,
                  dc.constant(np.full(yhat.shape, 1.0 - _CLIP)), p)
    yc = dc.constant(y.data)
    one_minus_y = dc.constant(1.0 - y.data)
    ll = dc.add(dc.mul(yc, dc.log(p)),
                dc.mul(one_minus_y, dc.log(dc.add_scalar(dc.neg(p), 1.0))))
    return dc.neg(dc.tmean(ll))


def reconstruction_loss(y, z: Tensor, decoder: DecoderParams,
                        kind: LossKind) -> Tensor:
    """loss(y, D(z)) with cross-entropy fused in logit space.

    This is the objective every flow solver and training path minimizes;
    it differs from loss(y, decode(z)) only in numerical conditioning.
    """
    if kind == LossKind.CROSS_ENTROPY:
        if decoder.output_mode != "sigmoid":
            raise ValueError("cross-entropy needs a sigmoid-output decoder")
        logits = decode_logits(z, decoder)
        ydata = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
        return dc.bce_with_logits(logits, ydata)
    return loss(dc._as_tensor(y), decode(z, decoder), LossKind.L2)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, decoder: DecoderParams,
                    encoder: EncoderParams | None = None,
                    extra: dict | None = None) -> None:
    """Write parameters plus architecture metadata; round-trips bit-exact."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "decoder_widths": decoder.widths,
        "decoder_output_mode": decoder.output_mode,
        "has_encoder": encoder is not None,
        "extra": extra or {},
    }
    arrays = {}
    for i, (w, b) in enumerate(zip(decoder.weights, decoder.biases)):
        arrays[f"dec_w{i}"] = w.data
        arrays[f"dec_b{i}"] = b.data
    if encoder is not None:
        meta["encoder_widths"] = encoder.widths
        for i, (w, b) in enumerate(zip(encoder.weights, encoder.biases)):
            arrays[f"enc_w{i}"] = w.data
            arrays[f"enc_b{i}"] = b.data
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **arrays)


def load_checkpoint(path):
    """Read a checkpoint; returns (decoder, encoder_or_None, extra_meta)."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"checkpoint version {meta.get('version')} unsupported "
                f"(expected {CHECKPOINT_VERSION})")
        widths = meta["decoder_widths"]
        n = len(widths) - 1
        dec = DecoderParams(
            [Tensor(z[f"dec_w{i}"], requires_grad=True) for i in range(n)],
            [Tensor(z[f"dec_b{i}"], requires_grad=True) for i in range(n)],
            widths, meta["decoder_output_mode"])
        enc = None
        if meta["has_encoder"]:
            ew = meta["encoder_widths"]
            m = len(ew) - 1
            enc = EncoderParams(
                [Tensor(z[f"enc_w{i}"], requires_grad=True) for i in range(m)],
                [Tensor(z[f"enc_b{i}"], requires_grad=True) for i in range(m)],
                ew, output_mode="identity")
        return dec, enc, meta["extra"]
