"""Bit-gradient layer sensitivity.

For a weight with loss gradient ``g`` and scale ``S``, the gradient of the
loss with respect to bit ``i`` of its two's-complement code is
``g * S * c_i`` with place value ``c_i`` (negative for the sign bit).  A
layer's NBG is the mean over weights of the row-wise L1 norm of those bit
gradients; its ENBG is the mean of per-epoch NBGs within one interval.
"""

from __future__ import annotations

from typing import Dict, Iterable, List

import numpy as np

from .errors import ContractError
from .quant import bit_weights


def bit_gradients(weight_grad, scale: float, q_max: int) -> np.ndarray:
    """``d x q_max`` matrix of loss bit gradients, sign-bit column first."""
    if scale <= 0:
        raise ContractError(f"scale must be positive, got {scale}")
    g = np.asarray(weight_grad, dtype=np.float64).reshape(-1, 1)
    return (g * scale) * bit_weights(q_max)


def nbg(bitgrads: np.ndarray) -> float:
    """Mean over rows of the row-wise L1 norm."""
    bitgrads = np.asarray(bitgrads, dtype=np.float64)
    if bitgrads.size == 0:
        return 0.0
    return float(np.abs(bitgrads).sum(axis=1).mean())


def nbg_closed_form(weight_grad, scale: float, q_max: int) -> float:
    """``mean|g| * S * (2**q_max - 1)``, equal to the bit-matrix NBG."""
    return float(np.abs(np.asarray(weight_grad)).mean() * scale * ((1 << q_max) - 1))


class SensitivityLedger:
    """Per-layer NBG accumulators for the current epoch and interval.

    Usage per interval: ``accumulate_batch`` for every sampled batch,
    ``finalize_epoch`` at each epoch end, read ``enbg`` at the interval
    boundary, then ``reset_interval``.
    """

    def __init__(self, layers: Iterable[str], q_max: int, closed_form: bool = False):
        self.layers = list(layers)
        self.q_max = int(q_max)
        self.closed_form = closed_form
        self.interval = 0
        self._sums = {name: 0.0 for name in self.layers}
        self._counts = {name: 0 for name in self.layers}
        self.epoch_nbg: Dict[str, List[float]] = {name: [] for name in self.layers}

    def accumulate_batch(self, layer: str, weight_grad, scale: float) -> float:
        if self.closed_form:
            value = nbg_closed_form(weight_grad, scale, self.q_max)
        else:
            value = nbg(bit_gradients(weight_grad, scale, self.q_max))
        self._sums[layer] += value
        self._counts[layer] += 1
        return value

    def finalize_epoch(self) -> None:
        for name in self.layers:
            if self._counts[name] == 0:
                raise ContractError(f"no batches were accumulated for layer {name!r} this epoch")
        for name in self.layers:
            self.epoch_nbg[name].append(self._sums[name] / self._counts[name])
            self._sums[name] = 0.0
            self._counts[name] = 0

    def enbg(self, layer: str) -> float:
        values = self.epoch_nbg[layer]
        if not values:
            raise ContractError(f"no finalized epochs for layer {layer!r} in interval {self.interval}")
        return float(np.mean(values))

    def enbg_all(self) -> Dict[str, float]:
        return {name: self.enbg(name) for name in self.layers}

    @property
    def epochs_in_interval(self) -> int:
        return len(self.epoch_nbg[self.layers[0]]) if self.layers else 0

    def reset_interval(self) -> None:
        for name in self.layers:
            self.epoch_nbg[name] = []
            self._sums[name] = 0.0
            self._counts[name] = 0
        self.interval += 1

    # -- serialization

    def snapshot(self) -> dict:
        """JSON-ready view: interval index and per-layer epoch NBG lists."""
        return {
            "interval": self.interval,
            "q_max": self.q_max,
            "epoch_nbg": {name: list(v) for name, v in self.epoch_nbg.items()},
        }

    def state(self) -> dict:
        snap = self.snapshot()
        snap["sums"] = dict(self._sums)
        snap["counts"] = dict(self._counts)
        snap["closed_form"] = self.closed_form
        return snap

    @classmethod
    def from_state(cls, state: dict) -> "SensitivityLedger":
        ledger = cls(state["epoch_nbg"].keys(), state["q_max"], state.get("closed_form", False))
        ledger.interval = state["interval"]
        ledger.epoch_nbg = {k: list(v) for k, v in state["epoch_nbg"].items()}
        ledger._sums.update(state.get("sums", {}))
        ledger._counts.update(state.get("counts", {}))
        return ledger
