"""Executable fake-quantized network built from a sequential ModelSpec.

The activation feeding layer ``l`` is quantized with layer ``l``'s width.
Layers whose successor is flexible produce that input through PACT; the
layer feeding the classifier uses plain ReLU.  The network input itself is
left unquantized.
"""

from __future__ import annotations

from typing import Dict, List, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError
from .models import FIXED_BITS, LayerSpec, ModelSpec
from .quant import (PactParam, QuantizedTensor, fake_quant_weight, frozen_weight, pact_quant,
                    quantize_weight)


class Network:
    """Shadow float weights, batchnorm state, and PACT clipping levels."""

    def __init__(self, spec: ModelSpec, seed: int = 0, pact_alpha_init: float = 8.0,
                 bn_momentum: float = 0.1):
        if not spec.sequential:
            raise ContractError(f"{spec.name} is not a sequential spec and cannot be executed")
        self.spec = spec
        self.bn_momentum = bn_momentum
        rng = np.random.default_rng(seed)
        self.weights: Dict[str, Tensor] = {}
        self.biases: Dict[str, Tensor] = {}
        self.bn: Dict[str, dict] = {}
        self.pact: Dict[str, PactParam] = {}
        layers = spec.layers
        for i, layer in enumerate(layers):
            fan_in = int(np.prod(layer.weight_shape[1:]))
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=layer.weight_shape)
            self.weights[layer.name] = Tensor(w, requires_grad=True)
            if layer.bias:
                self.biases[layer.name] = Tensor(np.zeros(layer.out_features), requires_grad=True)
            if layer.batchnorm:
                c = layer.out_features
                self.bn[layer.name] = {
                    "gamma": Tensor(np.ones(c), requires_grad=True),
                    "beta": Tensor(np.zeros(c), requires_grad=True),
                    "mean": np.zeros(c),
                    "var": np.ones(c),
                }
            if layer.activation == "pact":
                if i + 1 >= len(layers):
                    raise ContractError("the last layer cannot feed a PACT activation")
                self.pact[layers[i + 1].name] = PactParam.create(layers[i + 1].name, pact_alpha_init)
        self.bits: Dict[str, int] = {l.name: FIXED_BITS for l in layers}

    # -- parameter views

    def parameters(self) -> List[Tensor]:
        """Every trainable tensor in a fixed order."""
        out = []
        for layer in self.spec.layers:
            out.append(self.weights[layer.name])
            if layer.name in self.biases:
                out.append(self.biases[layer.name])
            if layer.name in self.bn:
                out += [self.bn[layer.name]["gamma"], self.bn[layer.name]["beta"]]
            if layer.name in self.pact:
                out.append(self.pact[layer.name].alpha)
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """All float state (trainable and running statistics) by stable key."""
        out = {}
        for name, t in self.weights.items():
            out[f"{name}.weight"] = t.data
        for name, t in self.biases.items():
            out[f"{name}.bias"] = t.data
        for name, d in self.bn.items():
            out[f"{name}.bn.gamma"] = d["gamma"].data
            out[f"{name}.bn.beta"] = d["beta"].data
            out[f"{name}.bn.mean"] = d["mean"]
            out[f"{name}.bn.var"] = d["var"]
        for name, p in self.pact.items():
            out[f"{name}.pact.alpha"] = p.alpha.data
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], weights: bool = True) -> None:
        for key, value in arrays.items():
            name, _, field = key.partition(".")
            value = np.array(value, dtype=np.float64)
            if field == "weight":
                if weights:
                    self.weights[name].data = value
            elif field == "bias":
                self.biases[name].data = value
            elif field in ("bn.gamma", "bn.beta"):
                self.bn[name][field[3:]].data = value
            elif field in ("bn.mean", "bn.var"):
                self.bn[name][field[3:]] = value
            elif field == "pact.alpha":
                self.pact[name].alpha.data = value
            else:
                raise KeyError(key)

    # -- quantization

    def set_bits(self, bits: Dict[str, int]) -> None:
        for name, q in bits.items():
            if name not in self.bits:
                raise KeyError(name)
            self.bits[name] = int(q)

    def quantized_weights(self) -> Dict[str, QuantizedTensor]:
        return {name: quantize_weight(t.data, self.bits[name]) for name, t in self.weights.items()}

    # -- forward

    def forward(self, x, training: bool = False, quantize: bool = True,
                frozen: Optional[Dict[str, QuantizedTensor]] = None, clip_ste: bool = False):
        """Run the network on an NCHW batch.

        Returns ``(logits, qweights)`` where ``qweights`` maps layer name to
        the :class:`QuantizedTensor` used (empty when ``quantize`` is off).
        ``frozen`` substitutes stored codes for the shadow weights.
        """
        h = x if isinstance(x, Tensor) else Tensor(x)
        layers = self.spec.layers
        used: Dict[str, QuantizedTensor] = {}
        for i, layer in enumerate(layers):
            if frozen is not None:
                used[layer.name] = frozen[layer.name]
                w = frozen_weight(frozen[layer.name])
            elif quantize:
                w, used[layer.name] = fake_quant_weight(self.weights[layer.name],
                                                        self.bits[layer.name], clip_ste)
            else:
                w = self.weights[layer.name]
            h = self._apply(layer, h, w, training)
            if layer.activation == "pact":
                nxt = layers[i + 1].name
                k = self.bits[nxt] if (quantize or frozen is not None) else None
                h = pact_quant(h, self.pact[nxt], k)
            elif layer.activation == "relu":
                h = ag.relu(h)
            if layer.pool is not None:
                kind, size = layer.pool
                h = ag.maxpool2d(h, size) if kind == "max" else ag.avgpool2d(h, size)
        return h, used

    def _apply(self, layer: LayerSpec, h: Tensor, w: Tensor, training: bool) -> Tensor:
        bias = self.biases.get(layer.name)
        if layer.kind == "conv":
            h = ag.conv2d(h, w, bias, stride=layer.stride, padding=layer.padding)
        else:
            if h.data.ndim > 2:
                h = ag.flatten(h)
            h = ag.dense(h, w, bias)
        if layer.batchnorm:
            bn = self.bn[layer.name]
            h = ag.batchnorm2d(h, bn["gamma"], bn["beta"], bn["mean"], bn["var"],
                               training, momentum=self.bn_momentum)
        return h

    def predict(self, x: np.ndarray, batch_size: int = 500, quantize: bool = True,
                frozen: Optional[Dict[str, QuantizedTensor]] = None) -> np.ndarray:
        """Class predictions in eval mode, computed batch by batch."""
        if frozen is None and quantize:
            frozen = self.quantized_weights()
        preds = []
        for start in range(0, len(x), batch_size):
            logits, _ = self.forward(x[start:start + batch_size], training=False,
                                     quantize=quantize, frozen=frozen)
            preds.append(logits.data.argmax(axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)

    def accuracy(self, x: np.ndarray, y: np.ndarray, **kwargs) -> float:
        return float((self.predict(x, **kwargs) == np.asarray(y)).mean())

