"""Weight-storage accounting in MB (2**20 bytes) and compression ratios.

Only weight elements count; biases, batchnorm parameters and the one scale
per layer are ignored.
"""

from __future__ import annotations

from typing import Dict, Sequence, Tuple, Union

from .models import ModelSpec, assignment_from_vector

MB = float(1 << 20)

Assignment = Union[Dict[str, int], Sequence[int]]


def _bits(spec: ModelSpec, assignment: Assignment) -> Dict[str, int]:
    if isinstance(assignment, dict):
        return {l.name: int(assignment.get(l.name, assignment.get(spec.leader(l.name))))
                for l in spec.layers}
    return assignment_from_vector(spec, list(assignment))


def storage_fp32(spec: ModelSpec) -> float:
    return 4 * sum(l.param_count for l in spec.layers) / MB


def storage_bmpq(spec: ModelSpec, assignment: Assignment) -> float:
    bits = _bits(spec, assignment)
    return (4 / 32) * sum(l.param_count * bits[l.name] for l in spec.layers) / MB


def compression_ratios(spec: ModelSpec, assignment: Assignment) -> Tuple[float, float]:
    """``(r32, r16)``: FP-32 and 16-bit baselines over mixed-precision storage."""
    r32 = storage_fp32(spec) / storage_bmpq(spec, assignment)
    return r32, 0.5 * r32


def bits_to_mb(bits: float) -> float:
    return bits / 8 / MB


def mb_to_bits(mb: float) -> int:
    return int(mb * MB * 8)


def storage_table(spec: ModelSpec, assignment: Assignment) -> list:
    """One row per layer: name, params, bits, MB at that width, MB at FP-32."""
    bits = _bits(spec, assignment)
    rows = []
    for l in spec.layers:
        rows.append({
            "layer": l.name,
            "params": l.param_count,
            "bits": bits[l.name],
            "fixed": spec.is_fixed(l.name),
            "tied_to": l.tie,
            "mb": l.param_count * bits[l.name] / 8 / MB,
            "mb_fp32": 4 * l.param_count / MB,
        })
    return rows
