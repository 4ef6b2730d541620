"""Encoder assembly: embedding, block chain, classifier head, RHS variants.

Two architectures share one classifier interface. The vanilla encoder stacks
N two-residual blocks with per-block weights. The ODE encoder chains N
initial value problems on [0, T_F]: block i integrates X' = F_i(X, t) from
block i-1's terminal state, where F_i is one of three right-hand sides built
from that block's attention and feed-forward modules:

    basic          F = FFN_t(MHSA_t(X))
    mhsa_skip      F = FFN_t(X + MHSA_t(X))
    euler_analogue F = MHSA_t(X) + FFN_t(X + MHSA_t(X))

The FFN is always time-parameterized; attention optionally so. Inputs are
token sequences over {0, 1, SOS} with SOS in front; the head classifies the
parity from the SOS column of the final state. The squared Frobenius norm of
F along each trajectory, scaled by 1/(2 * bit count), is accumulated as the
trajectory-length integral used both for regularization and as a reported
metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .layers import ConfigError, FfnModule, MhsaModule, VanillaBlock, make_affine, uniform_init
from .odeint import SolveStats, SolverConfig, SolverError, solve_adaptive, solve_euler_fixed

TOKEN_ZERO = 0
TOKEN_ONE = 1
TOKEN_SOS = 2
VOCAB_SIZE = 3

ARCHITECTURES = ("vanilla", "node")
RHS_VARIANTS = ("basic", "mhsa_skip", "euler_analogue")


@dataclass
class ModelConfig:
    d: int = 8
    n_blocks: int = 2
    architecture: str = "node"
    rhs_variant: str = "basic"
    mhsa_time_dependent: bool = False
    alpha: int | None = None
    t_final: float = 1.0
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.d < 2 or self.d % 2 != 0:
            raise ConfigError(f"d must be even and >= 2, got {self.d}")
        if self.n_blocks < 1:
            raise ConfigError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.rhs_variant not in RHS_VARIANTS:
            raise ConfigError(f"unknown rhs variant {self.rhs_variant!r}")
        if self.rhs_variant == "euler_analogue" and self.architecture != "node":
            raise ConfigError("the euler_analogue right-hand side requires the node architecture")
        expected_alpha = 1 if self.rhs_variant == "mhsa_skip" else 0
        if self.alpha is None:
            self.alpha = expected_alpha
        elif self.alpha != expected_alpha:
            raise ConfigError(
                f"alpha={self.alpha} inconsistent with rhs_variant={self.rhs_variant!r}"
            )
        if self.t_final <= 0.0:
            raise ConfigError(f"t_final must be positive, got {self.t_final}")

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "n_blocks": self.n_blocks,
            "architecture": self.architecture,
            "rhs_variant": self.rhs_variant,
            "mhsa_time_dependent": self.mhsa_time_dependent,
            "alpha": self.alpha,
            "t_final": self.t_final,
            "solver": {
                "atol": self.solver.atol,
                "rtol": self.solver.rtol,
                "h_init": self.solver.h_init,
                "h_min": self.solver.h_min,
                "h_max": self.solver.h_max,
                "safety": self.solver.safety,
                "max_steps": self.solver.max_steps,
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        solver = SolverConfig(**data.pop("solver", {}))
        return cls(solver=solver, **data)


class EncodeError(RuntimeError):
    """A block's solve failed; carries the failing block index and the cause."""

    def __init__(self, block_index: int, cause: Exception):
        super().__init__(f"block {block_index}: {cause}")
        self.block_index = block_index
        self.cause = cause


class NodeBlock:
    """One ODE block: attention + FFN modules and the chosen right-hand side."""

    def __init__(self, params: ParameterSet, name: str, d: int, variant: str,
                 mhsa_time_dependent: bool, rng: np.random.Generator):
        self.variant = variant
        self.mhsa = MhsaModule(params, f"{name}.mhsa", d, mhsa_time_dependent, rng)
        self.ffn = FfnModule(params, f"{name}.ffn", d, time_dependent=True, rng=rng)

    def rhs(self, x: Tensor, t: float, blocks: int = 1) -> Tensor:
        a = self.mhsa(x, t, blocks)
        if self.variant == "basic":
            return self.ffn(a, t)
        if self.variant == "mhsa_skip":
            return self.ffn(ad.add(x, a), t)
        # euler_analogue
        return ad.add(a, self.ffn(ad.add(x, a), t))


def tokens_to_onehot(token_lists: Sequence[Sequence[int]]) -> np.ndarray:
    """Stack sequences column-wise into a VOCAB_SIZE x (B*L) indicator matrix."""
    L = len(token_lists[0])
    flat = np.fromiter(
        (tok for toks in token_lists for tok in toks), dtype=np.intp,
        count=L * len(token_lists),
    )
    onehot = np.zeros((VOCAB_SIZE, flat.size))
    onehot[flat, np.arange(flat.size)] = 1.0
    return onehot


class TransformerClassifier:
    """Embedding + encoder blocks + parity head, owning one ParameterSet.

    Batched calls take same-length sequences stacked side by side; attention
    never mixes two sequences. For the node architecture a batch shares one
    adaptive step sequence per block; per-input depth is measured by running
    single-sequence encodes (see Trainer's post-fit probe).
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params = ParameterSet()
        rng = np.random.default_rng(seed)
        d = cfg.d
        self.embedding = self.params.add("embedding.E", uniform_init(rng, d, VOCAB_SIZE))
        self.blocks: list[VanillaBlock | NodeBlock] = []
        for i in range(cfg.n_blocks):
            if cfg.architecture == "vanilla":
                self.blocks.append(VanillaBlock(self.params, f"block{i}", d, rng))
            else:
                self.blocks.append(NodeBlock(
                    self.params, f"block{i}", d, cfg.rhs_variant,
                    cfg.mhsa_time_dependent, rng,
                ))
        self.head_fc1 = make_affine(self.params, "head.fc1", d, d, False, rng)
        self.head_fc2 = make_affine(self.params, "head.fc2", d, d, False, rng)
        self.head_out = make_affine(self.params, "head.out", d, 2, False, rng)

    # ---- encoding -------------------------------------------------------

    def embed(self, token_lists: Sequence[Sequence[int]]) -> Tensor:
        return ad.matmul(self.embedding, Tensor(tokens_to_onehot(token_lists)))

    def encode_batch(self, token_lists: Sequence[Sequence[int]],
                     collect_density: bool = True,
                     ) -> tuple[Tensor, Tensor, list[SolveStats]]:
        """Run the encoder over a stack of equal-length sequences.

        Returns the final hidden state (d x B*L), the summed trajectory
        integral over blocks (zero for vanilla), and per-block solve stats.
        """
        L = len(token_lists[0])
        if L < 2:
            raise ad.ContractError("sequences must contain SOS plus at least one bit")
        for toks in token_lists:
            if len(toks) != L:
                raise ad.ContractError("batched sequences must share one length")
            if toks[0] != TOKEN_SOS:
                raise ad.ContractError("sequences must begin with the SOS token")
        batch = len(token_lists)
        x = self.embed(token_lists)
        if self.cfg.architecture == "vanilla":
            for blk in self.blocks:
                x = blk(x, blocks=batch)
            return x, Tensor([[0.0]]), []

        bits = L - 1
        inv = 1.0 / (2.0 * bits * batch)

        def density(_x: Tensor, _t: float, dxdt: Tensor) -> Tensor:
            return ad.scale(ad.frobenius_sq(dxdt), inv)

        reg_total = Tensor([[0.0]])
        stats_list: list[SolveStats] = []
        for i, blk in enumerate(self.blocks):
            def rhs(xx: Tensor, tt: float, _blk=blk) -> Tensor:
                return _blk.rhs(xx, tt, blocks=batch)

            try:
                x, reg, stats = solve_adaptive(
                    rhs, x, 0.0, self.cfg.t_final, self.cfg.solver,
                    density if collect_density else None,
                )
            except (SolverError, ad.NumericError) as e:
                raise EncodeError(i, e) from e
            reg_total = ad.add(reg_total, reg)
            stats_list.append(stats)
        return x, reg_total, stats_list

    def encode(self, tokens: Sequence[int]) -> tuple[Tensor, Tensor, list[SolveStats]]:
        """Single-sequence encode; trajectory integral always collected."""
        return self.encode_batch([tokens], collect_density=True)

    # ---- classification -------------------------------------------------

    def logits(self, x_final: Tensor, seq_len: int, batch: int) -> Tensor:
        """2 x batch logits from the SOS column of each stacked sequence."""
        sos = ad.select_columns(x_final, np.arange(batch) * seq_len)
        h = ad.relu(self.head_fc1(sos))
        h = ad.relu(self.head_fc2(h))
        return self.head_out(h)

    def classify(self, x_final: Tensor) -> Tensor:
        """(p_even, p_odd) for a single encoded sequence, as a 2x1 tensor."""
        return ad.softmax_columns(self.logits(x_final, x_final.shape[1], 1))

    def predict(self, token_lists: Sequence[Sequence[int]]) -> np.ndarray:
        """Hard labels (0 = even, 1 = odd) for equal-length sequences."""
        with ad.no_grad():
            x, _, _ = self.encode_batch(token_lists, collect_density=False)
            z = self.logits(x, len(token_lists[0]), len(token_lists))
        return np.argmax(z.data, axis=0)


def time_bias_param_count(cfg: ModelConfig) -> int:
    """Size of all time-direction vectors `c` the config introduces.

    Computed symbolically: the FFN contributes two d-vectors per block, and a
    time-parameterized attention module adds one length-2 vector per q/k/v
    projection per head plus a d-vector for the output projection. A vanilla
    model has none.
    """
    if cfg.architecture == "vanilla":
        return 0
    d = cfg.d
    per_block = 2 * d
    if cfg.mhsa_time_dependent:
        per_block += (d // 2) * 3 * 2 + d
    return cfg.n_blocks * per_block


def residual_decay_probe(model: TransformerClassifier, tokens: Sequence[int],
                         step_counts: Sequence[int]) -> list[tuple[int, float]]:
    """Max Euler increment norm across all blocks, per step count.

    With weights frozen, each increment is (T_F/n) * F(X_n, t_n); the table
    shows how the largest per-step contribution shrinks as n grows.
    """
    if model.cfg.architecture != "node":
        raise ConfigError("residual probe applies to the node architecture")
    rows: list[tuple[int, float]] = []
    with ad.no_grad():
        for n in step_counts:
            x = model.embed([tokens])
            norms: list[float] = []
            for blk in model.blocks:
                x, res = solve_euler_fixed(
                    lambda xx, tt, _blk=blk: _blk.rhs(xx, tt, blocks=1),
                    x, 0.0, model.cfg.t_final, n,
                )
                norms.extend(res)
            rows.append((n, max(norms)))
    return rows


def loglog_slope(rows: Sequence[tuple[int, float]]) -> float | None:
    """Least-squares slope of log(value) vs log(n); None when degenerate."""
    if len(rows) < 2 or any(v <= 0.0 for _, v in rows):
        return None
    ns = np.log([float(n) for n, _ in rows])
    vs = np.log([v for _, v in rows])
    return float(np.polyfit(ns, vs, 1)[0])
