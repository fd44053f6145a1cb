"""Weight and activation quantizers plus the two's-complement bit codec.

Weights use one symmetric per-tensor scale (max-abs over the largest code),
except at 2 bits where the ternary scheme {-a, 0, +a} is used.  Activations
pass through PACT clipping and a uniform unsigned grid on [0, alpha].

Rounding everywhere is round-half-away-from-zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autograd import Tensor, _node
from .errors import CodeOverflowError, ContractError, UnsupportedWidthError

SUPPORTED_WIDTHS = (2, 4, 8, 16)
TERNARY_THRESHOLD = 0.7
ALPHA_FLOOR = 1e-3


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def max_code(bits: int) -> int:
    """Largest symmetric code magnitude, ``2**(bits-1) - 1``."""
    return (1 << (bits - 1)) - 1


@dataclass
class QuantizedTensor:
    """Integer codes on a uniform grid; ``dequantize() == codes * scale``."""

    codes: np.ndarray  # int64, same shape as the source tensor
    scale: float
    bits: int
    mode: str = "symmetric"  # or "ternary"

    def dequantize(self) -> np.ndarray:
        return self.codes * self.scale

    @property
    def shape(self) -> tuple:
        return self.codes.shape

    def __post_init__(self):
        if self.mode == "ternary":
            if self.bits != 2 or np.any(np.abs(self.codes) > 1):
                raise ContractError("ternary tensors hold codes in {-1, 0, 1} at 2 bits")
        elif self.mode == "symmetric":
            if np.any(np.abs(self.codes) > max_code(self.bits)):
                raise CodeOverflowError(f"code outside the symmetric {self.bits}-bit range")
        else:
            raise ContractError(f"unknown quantization mode {self.mode!r}")


def _check_width(q: int) -> None:
    if int(q) != q or q < 2:
        raise UnsupportedWidthError(f"bit width must be an integer >= 2, got {q}")


def compute_scale(w, q: int) -> float:
    """Max-abs scale ``max|w| / (2**(q-1) - 1)``; 1.0 for an all-zero tensor."""
    _check_width(q)
    m = float(np.max(np.abs(w))) if np.size(w) else 0.0
    if m == 0.0:
        return 1.0
    return m / max_code(q)


def quantize_symmetric(w, q: int) -> QuantizedTensor:
    _check_width(q)
    if q == 2:
        raise ContractError("2-bit weights are ternary; call quantize_ternary")
    w = np.asarray(w, dtype=np.float64)
    scale = compute_scale(w, q)
    top = max_code(q)
    codes = np.clip(round_half_away(w / scale), -top, top).astype(np.int64)
    return QuantizedTensor(codes, scale, int(q), "symmetric")


def quantize_ternary(w) -> QuantizedTensor:
    """Threshold ternarization.

    Codes are ``sign(w)`` where ``|w| > 0.7 * mean|w|`` and zero elsewhere;
    the scale is the mean magnitude over the kept coordinates, which is the
    least-squares optimal scale for that support.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ContractError("cannot ternarize an empty tensor")
    mag = np.abs(w)
    delta = TERNARY_THRESHOLD * mag.mean()
    keep = mag > delta
    codes = np.where(keep, np.sign(w), 0.0).astype(np.int64)
    scale = float(mag[keep].mean()) if keep.any() else 1.0
    return QuantizedTensor(codes, scale, 2, "ternary")


def quantize_weight(w, q: int) -> QuantizedTensor:
    """Route to ternary at 2 bits, symmetric otherwise."""
    return quantize_ternary(w) if q == 2 else quantize_symmetric(w, q)


def ste_backward_weight(grad_out: np.ndarray) -> np.ndarray:
    """Straight-through rule for weight rounding: the identity."""
    return grad_out


def fake_quant_weight(w: Tensor, q: int, clip_ste: bool = False):
    """Quantize-dequantize ``w`` in the forward pass.

    Returns ``(tensor, qt)`` where ``tensor`` carries ``qt.dequantize()`` and
    passes gradients straight through to ``w``.  With ``clip_ste`` the
    gradient is zeroed where ``|w|`` lies beyond the outermost grid point.
    """
    qt = quantize_weight(w.data, q)
    if clip_ste:
        top = 1 if qt.mode == "ternary" else max_code(q)
        inside = np.abs(w.data) <= top * qt.scale

        def rule(g):
            return (np.where(inside, g, 0.0),)
    else:
        def rule(g):
            return (ste_backward_weight(g),)

    return _node(qt.dequantize(), (w,), rule, "fake_quant_weight"), qt


def frozen_weight(qt: QuantizedTensor) -> Tensor:
    """Constant tensor holding already-quantized values (inference only)."""
    return Tensor(qt.dequantize())


# ---------------------------------------------------------------- activations


@dataclass
class PactParam:
    """Trainable clipping level of one PACT activation."""

    alpha: Tensor
    layer: str

    @classmethod
    def create(cls, layer: str, init: float = 8.0) -> "PactParam":
        return cls(Tensor(np.array(float(init)), requires_grad=True), layer)

    @property
    def value(self) -> float:
        return float(self.alpha.data)

    def clamp(self, floor: float = ALPHA_FLOOR) -> None:
        if self.alpha.data < floor:
            self.alpha.data = np.array(floor)


def pact_forward(a, alpha: float) -> np.ndarray:
    """Clip to [0, alpha]: 0 below zero, identity inside, alpha at and above."""
    if alpha <= 0:
        raise ContractError(f"PACT needs alpha > 0, got {alpha}")
    return np.clip(np.asarray(a, dtype=np.float64), 0.0, alpha)


def pact_algebraic(a, alpha: float) -> np.ndarray:
    """The same clip written as ``0.5 * (|a| - |a - alpha| + alpha)``."""
    a = np.asarray(a, dtype=np.float64)
    return 0.5 * (np.abs(a) - np.abs(a - alpha) + alpha)


def quantize_activation(a_o, alpha: float, k: int) -> np.ndarray:
    """Snap clipped activations in [0, alpha] to ``2**k - 1`` uniform steps."""
    _check_width(k)
    levels = (1 << k) - 1
    # inputs are non-negative, so half-away rounding is floor(v + 0.5)
    codes = np.floor(np.asarray(a_o, dtype=np.float64) * (levels / alpha) + 0.5)
    return alpha * (codes / levels)


def pact_alpha_grad(a_i, alpha: float, grad_out) -> float:
    """STE gradient of the quantized PACT output w.r.t. alpha."""
    return float(np.sum(np.where(np.asarray(a_i) >= alpha, grad_out, 0.0)))


def pact_quant(x: Tensor, pact: PactParam, k: Optional[int]) -> Tensor:
    """PACT clip followed by ``k``-bit quantization (``k=None`` skips the grid).

    Backward: ``x`` receives the gradient where ``0 <= x < alpha``; alpha
    receives the sum of gradients where ``x >= alpha``.
    """
    alpha = pact.value
    out = pact_forward(x.data, alpha)
    if k is not None:
        out = quantize_activation(out, alpha, k)
    xd = x.data

    def rule(g):
        clipped = xd >= alpha
        gx = np.where(clipped | (xd < 0), 0.0, g)
        return gx, np.asarray(float(np.sum(g[clipped])))

    return _node(out, (x, pact.alpha), rule, "pact_quant")


# ---------------------------------------------------------------- bit codec


@dataclass
class BitMatrix:
    """Two's-complement bits of each code, one row per element.

    Columns run from the sign bit ``b[q_max-1]`` down to ``b[0]``.
    """

    bits: np.ndarray  # uint8, (d, q_max)
    shape: tuple

    @property
    def q_max(self) -> int:
        return self.bits.shape[1]


def bit_weights(q_max: int) -> np.ndarray:
    """Place values of the columns of a :class:`BitMatrix` (sign bit first)."""
    w = np.array([float(1 << i) for i in range(q_max - 1, -1, -1)])
    w[0] = -w[0]
    return w


def codes_to_bits(codes: np.ndarray, q_max: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64).ravel()
    lo, hi = -(1 << (q_max - 1)), (1 << (q_max - 1)) - 1
    bad = np.flatnonzero((codes < lo) | (codes > hi))
    if bad.size:
        raise CodeOverflowError(
            f"code {codes[bad[0]]} at element {bad[0]} does not fit in {q_max}-bit two's complement")
    unsigned = codes & ((1 << q_max) - 1)
    shifts = np.arange(q_max - 1, -1, -1, dtype=np.int64)
    return ((unsigned[:, None] >> shifts) & 1).astype(np.uint8)


def bits_to_codes(bits: np.ndarray) -> np.ndarray:
    q_max = bits.shape[1]
    shifts = np.arange(q_max - 1, -1, -1, dtype=np.int64)
    unsigned = (bits.astype(np.int64) << shifts).sum(axis=1)
    sign = bits[:, 0].astype(np.int64)
    return unsigned - (sign << q_max)


def bit_decompose(qt: QuantizedTensor, q_max: int) -> BitMatrix:
    if q_max < qt.bits:
        raise ContractError(f"q_max={q_max} is narrower than the tensor's {qt.bits} bits")
    return BitMatrix(codes_to_bits(qt.codes, q_max), qt.codes.shape)


def bit_compose(bm: BitMatrix, scale: float) -> np.ndarray:
    """Inverse of :func:`bit_decompose`, returning dequantized values."""
    return bits_to_codes(bm.bits).reshape(bm.shape) * scale
