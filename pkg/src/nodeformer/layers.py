"""Transformer building blocks on top of the autodiff engine.

Affine maps come in two flavours: plain `A x + b`, and a time-parameterized
variant `A x + b + c t` whose extra direction vector `c` lets one weight set
serve a whole continuum of "layers". Multi-headed self-attention always uses
d/2 heads of size 2 plus a d x d output projection; the feed-forward module is
a dimension-preserving single-hidden-layer MLP with ReLU. No dropout, no layer
normalization, no positional encodings.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor


class ConfigError(ValueError):
    """Invalid architectural configuration."""


def uniform_init(rng: np.random.Generator, d_out: int, d_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(d_in)
    return rng.uniform(-bound, bound, size=(d_out, d_in))


class AffineLayer:
    """x -> A x + b, bias broadcast over columns."""

    time_dependent = False

    def __init__(self, params: ParameterSet, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator):
        self.name = name
        self.A = params.add(f"{name}.A", uniform_init(rng, d_out, d_in))
        self.b = params.add(f"{name}.b", np.zeros((d_out, 1)))

    def __call__(self, x: Tensor, t: float = 0.0) -> Tensor:
        return ad.affine(self.A, x, self.b)


class TimeAffineLayer(AffineLayer):
    """x -> A x + b + c t; reduces exactly to AffineLayer at t = 0."""

    time_dependent = True

    def __init__(self, params, name, d_in, d_out, rng):
        super().__init__(params, name, d_in, d_out, rng)
        self.c = params.add(f"{name}.c", np.zeros((d_out, 1)))

    def __call__(self, x: Tensor, t: float = 0.0) -> Tensor:
        return ad.affine(self.A, x, self.b, self.c, t)


def make_affine(params, name, d_in, d_out, time_dependent: bool, rng) -> AffineLayer:
    cls = TimeAffineLayer if time_dependent else AffineLayer
    return cls(params, name, d_in, d_out, rng)


class MhsaModule:
    """Multi-headed self-attention with d/2 heads of dimension 2.

    `blocks` tells the attention op how many independent sequences are stacked
    side by side in the input columns; weights never cross block boundaries.
    """

    HEAD_DIM = 2

    def __init__(self, params: ParameterSet, name: str, d: int, time_dependent: bool,
                 rng: np.random.Generator):
        if d < 2 or d % 2 != 0:
            raise ConfigError(f"attention needs an even embedding dimension >= 2, got d={d}")
        self.d = d
        self.time_dependent = time_dependent
        self.n_heads = d // 2
        self.heads = []
        for h in range(self.n_heads):
            prefix = f"{name}.head{h}"
            self.heads.append((
                make_affine(params, f"{prefix}.q", d, self.HEAD_DIM, time_dependent, rng),
                make_affine(params, f"{prefix}.k", d, self.HEAD_DIM, time_dependent, rng),
                make_affine(params, f"{prefix}.v", d, self.HEAD_DIM, time_dependent, rng),
            ))
        self.out = make_affine(params, f"{name}.out", d, d, time_dependent, rng)

    def __call__(self, x: Tensor, t: float = 0.0, blocks: int = 1) -> Tensor:
        outs = []
        for q, k, v in self.heads:
            outs.append(ad.block_attention(q(x, t), k(x, t), v(x, t), blocks))
        return self.out(ad.concat_rows(outs), t)

    def head_weights(self, x: Tensor, t: float = 0.0, blocks: int = 1) -> list[np.ndarray]:
        """Per-head attention weight stacks, for inspection only."""
        with ad.no_grad():
            return [ad.attention_weights(q(x, t), k(x, t), v(x, t), blocks)
                    for q, k, v in self.heads]


class FfnModule:
    """Dimension-preserving position-wise MLP: d -> d -> d with ReLU between."""

    def __init__(self, params: ParameterSet, name: str, d: int, time_dependent: bool,
                 rng: np.random.Generator):
        self.d = d
        self.time_dependent = time_dependent
        self.hidden = make_affine(params, f"{name}.hidden", d, d, time_dependent, rng)
        self.out = make_affine(params, f"{name}.out", d, d, time_dependent, rng)

    def __call__(self, x: Tensor, t: float = 0.0) -> Tensor:
        return self.out(ad.relu(self.hidden(x, t)), t)


class VanillaBlock:
    """Two-residual encoder block: Y = X + MHSA(X); out = Y + FFN(Y)."""

    def __init__(self, params: ParameterSet, name: str, d: int, rng: np.random.Generator):
        self.mhsa = MhsaModule(params, f"{name}.mhsa", d, time_dependent=False, rng=rng)
        self.ffn = FfnModule(params, f"{name}.ffn", d, time_dependent=False, rng=rng)

    def __call__(self, x: Tensor, blocks: int = 1) -> Tensor:
        y = ad.add(x, self.mhsa(x, 0.0, blocks))
        return ad.add(y, self.ffn(y, 0.0))
