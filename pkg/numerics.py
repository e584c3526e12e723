"""Shared numeric conventions: 64-bit floats and counter-based random streams."""
from __future__ import annotations

import zlib
from typing import Protocol, Union

import numpy as np
import torch

from errors import NumericalFailureError

DTYPE = torch.float64

TimeLike = Union[float, torch.Tensor]

_STREAMS = ("train", "sample", "estimate", "langevin", "monitor", "exact")


def derive_generator(seed: int, purpose: str, *counters: int) -> torch.Generator:
    """Return a torch generator keyed by (seed, purpose, counters).

    Draws only depend on the key, never on how many draws happened before or
    on the number of worker threads.
    """
    tag = _STREAMS.index(purpose) if purpose in _STREAMS else zlib.crc32(purpose.encode("utf-8"))
    sequence = np.random.SeedSequence([int(seed), tag, *(int(c) for c in counters)])
    state = int(sequence.generate_state(1, dtype=np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF)
    generator = torch.Generator()
    generator.manual_seed(state)
    return generator


def as_time(t: TimeLike, batch: int) -> torch.Tensor:
    """Broadcast a scalar or per-element time to a float64 vector of length ``batch``."""
    tensor = torch.as_tensor(t, dtype=DTYPE)
    if tensor.dim() == 0:
        return tensor.expand(batch).clone()
    return tensor.reshape(batch)


def standard_normal(shape: tuple[int, ...], generator: torch.Generator) -> torch.Tensor:
    return torch.randn(shape, generator=generator, dtype=DTYPE)


def ensure_finite(values: torch.Tensor, message: str, t: torch.Tensor, x: torch.Tensor) -> None:
    bad = ~torch.isfinite(values)
    if bad.dim() > 1:
        bad = bad.flatten(1).any(dim=1)
    if bool(bad.any()):
        index = int(torch.nonzero(bad)[0])
        t_bad = float(t.reshape(-1)[index]) if t.numel() > 1 else float(t.reshape(-1)[0])
        raise NumericalFailureError(message, t=t_bad, x=x[index].detach().tolist())


class ScalarField(Protocol):
    """A scalar function of (t, x) with an exact spatial gradient.

    Implemented by the trained networks and by the closed-form oracles.
    """

    d: int

    def value(self, t: TimeLike, x: torch.Tensor) -> torch.Tensor: ...

    def grad_x(
        self, t: TimeLike, x: torch.Tensor, create_graph: bool = False, check_finite: bool = True
    ) -> torch.Tensor: ...

    def value_and_grad(
        self, t: TimeLike, x: torch.Tensor, create_graph: bool = False
    ) -> tuple[torch.Tensor, torch.Tensor]: ...
