"""Low-rank adapters for parameter-efficient private fine-tuning.

An adapter adds scaling * (x @ down) @ up to a frozen affine layer. The
factors are stored in affine orientation (down [d, r], up [r, p]) so both
halves run through the standard affine op and get ghost-clipping captures
for free. `up` starts at zero, so a freshly adapted layer reproduces the
frozen base output exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional

from . import rng
from .autodiff import PerExampleCaptures, Tensor, add, affine, parameter, scale

INIT_STD = 0.02


class AdapterConfigError(ValueError):
    pass


@dataclass
class LoraAdapter:
    layer_name: str
    down: Tensor     # [d, r]
    up: Tensor       # [r, p]
    rank: int
    scaling: float   # alpha / rank

    @property
    def param_count(self) -> int:
        return self.down.data.size + self.up.data.size

    def named_params(self) -> Dict[str, Tensor]:
        return {self.down.name: self.down, self.up.name: self.up}


def make_adapter(layer_name: str, d: int, p: int, rank: int = 8,
                 alpha: float = 16.0, seed: int = 0) -> LoraAdapter:
    """Fresh adapter: down ~ N(0, 0.02^2), up = 0."""
    if rank < 1:
        raise AdapterConfigError(f"adapter rank must be >= 1, got {rank}")
    if rank > min(d, p):
        raise AdapterConfigError(
            f"adapter rank {rank} exceeds min({d}, {p}) for layer {layer_name!r}")
    down = parameter(rng.normal((d, rank), INIT_STD, "lora", seed, layer_name, "down"),
                     name=f"{layer_name}.lora_down")
    up = parameter([[0.0] * p for _ in range(rank)], name=f"{layer_name}.lora_up")
    return LoraAdapter(layer_name=layer_name, down=down, up=up,
                       rank=rank, scaling=alpha / rank)


def lora_forward(x: Tensor, base_weight: Tensor, adapter: LoraAdapter,
                 bias: Optional[Tensor] = None,
                 captures: Optional[PerExampleCaptures] = None) -> Tensor:
    """y = x W_base (+ b) + scaling * (x @ down) @ up.

    The two low-rank affines record per-example captures; the frozen base
    weight records nothing and receives no gradient.
    """
    if adapter.down.shape[0] != base_weight.shape[0] or adapter.up.shape[1] != base_weight.shape[1]:
        raise AdapterConfigError(
            f"adapter {adapter.layer_name!r} shaped {adapter.down.shape}x{adapter.up.shape} "
            f"does not match base weight {base_weight.shape}")
    base_out = affine(x, base_weight, bias, name=adapter.layer_name, captures=captures)
    low = affine(x, adapter.down, name=adapter.down.name, captures=captures)
    high = affine(low, adapter.up, name=adapter.up.name, captures=captures)
    return add(base_out, scale(high, adapter.scaling))


def trainable_fraction(base_params: Iterable[Tensor],
                       adapters: List[LoraAdapter]) -> float:
    """(#adapter params) / (#all params); 1.0 when everything is trainable."""
    base_count = sum(p.data.size for p in base_params)
    if not adapters:
        return 1.0
    adapter_count = sum(a.param_count for a in adapters)
    return adapter_count / (base_count + adapter_count)
