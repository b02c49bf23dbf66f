"""
Fisher Information Estimators

Curvature of the log-likelihood over LoRA parameters:
- exact_fisher: dense D x D oracle for small networks
- diag_fisher: its diagonal
- accumulate_kfac: per-sublayer Kronecker factorization whose large factor
  is kept as a rank-n_kfac root, accumulated by repeated truncated SVD so no
  d x d matrix is ever formed

KFAC factors per sublayer (weight gradient G = g a^T, vec(G) = a kron g):
- A-sublayer: input side (n_in) is large, output-gradient side (rank) small
- B-sublayer: input side (rank) is small, output-gradient side (n_out) large

The block estimate is F ~ (small sum / N) kron (large sum), with N the number
of data points, oriented by the pinned vec convention. The 1/N is folded into
the small factor so a single datum reproduces the exact block.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import softmax

from laplace_lora.config import FisherMode, FisherVariant
from laplace_lora.core.errors import DimMismatch, TooLarge
from laplace_lora.core.linalg import (
    CholeskyFactor,
    LowRankFactor,
    Matrix,
    Vector,
    cholesky,
    kron,
    svd_topk,
)
from laplace_lora.core.lora_net import LoraNetwork, ParamLayout, backward, forward

logger = logging.getLogger("laplace-lora.curvature")

MAX_EXACT_PARAMS = 2000


class Orientation(str, Enum):
    """Which side of a sublayer carries the large Kronecker factor"""

    INPUT_LARGE = "input_large"
    OUTPUT_LARGE = "output_large"


def _small_root(small: Matrix, chol: CholeskyFactor) -> Matrix:
    if chol.jitter == 0.0:
        return chol.lower
    # the factor is singular; an eigen-root reproduces it without the jitter
    evals, evecs = np.linalg.eigh(small)
    return evecs * np.sqrt(np.clip(evals, 0.0, None))


@dataclass(frozen=True)
class KfacBlock:
    """
    Kronecker-factored curvature of one sublayer

    Attributes:
        sublayer: Sublayer id, e.g. layer1.lora_a
        weight_shape: (rows, cols) of the sublayer weight
        orientation: Side holding the large factor
        small: Dense small factor including the 1/N normalization
        small_chol: Cholesky factor of small (jitter recorded when singular)
        large_root: Root of the large factor, d_large x (<= n_kfac)
    """

    sublayer: str
    weight_shape: Tuple[int, int]
    orientation: Orientation
    small: Matrix
    small_chol: CholeskyFactor
    large_root: LowRankFactor

    @property
    def size(self) -> int:
        return self.weight_shape[0] * self.weight_shape[1]

    @property
    def n_small(self) -> int:
        return int(self.small.shape[0])

    @property
    def small_root(self) -> Matrix:
        """L with L @ L.T == small exactly"""
        return _small_root(self.small, self.small_chol)

    def large_by_small(self, g: Matrix) -> Matrix:
        """Express a weight-shaped matrix as d_large x n_small"""
        return g if self.orientation == Orientation.OUTPUT_LARGE else g.T

    def dense(self) -> Matrix:
        """Dense block in vec(weight) coordinates; small blocks only"""
        large = self.large_root.dense()
        if self.orientation == Orientation.OUTPUT_LARGE:
            return kron(self.small, large)
        return kron(large, self.small)

    def memory_footprint(self) -> int:
        """Floats held by the block: never d_large^2"""
        return int(
            self.small.size + self.small_chol.lower.size + self.large_root.root.size
        )


@dataclass(frozen=True)
class FullFisher:
    matrix: Matrix
    layout: ParamLayout
    n_data: int = 0

    variant = FisherVariant.FULL


@dataclass(frozen=True)
class DiagFisher:
    diagonal: Vector
    layout: ParamLayout
    n_data: int = 0

    variant = FisherVariant.DIAG


@dataclass(frozen=True)
class KfacFisher:
    blocks: Tuple[KfacBlock, ...]
    layout: ParamLayout
    n_data: int = 0

    variant = FisherVariant.KFAC

    def block(self, sid: str) -> KfacBlock:
        for blk in self.blocks:
            if blk.sublayer == sid:
                return blk
        raise KeyError(sid)

    def dense(self) -> Matrix:
        """Block-diagonal dense matrix; for test oracles"""
        out = np.zeros((self.layout.size, self.layout.size))
        for blk in self.blocks:
            sl = self.layout.slice(blk.sublayer)
            out[sl, sl] = blk.dense()
        return out


FisherEstimate = Union[FullFisher, DiagFisher, KfacFisher]


def _scope_layout(net: LoraNetwork, sublayers: Optional[Sequence[str]]) -> ParamLayout:
    layout = net.layout()
    return layout if sublayers is None else layout.restrict(sublayers)


def _per_class_grads(net: LoraNetwork, x: Vector, index: np.ndarray) -> Tuple[Matrix, Vector]:
    """Rows g_c = grad of -log p(c|x) restricted to index, and p"""
    trace = forward(net, x)
    p = softmax(trace.logits)
    rows = np.zeros((net.n_classes, index.size))
    for c in range(net.n_classes):
        grad_logits = p.copy()
        grad_logits[c] -= 1.0
        grads, _ = backward(net, trace, grad_logits)
        rows[c] = grads.theta[index]
    return rows, p


def _scope_index(net: LoraNetwork, layout: ParamLayout) -> np.ndarray:
    full = net.layout()
    return np.concatenate(
        [np.arange(full.slice(e.id).start, full.slice(e.id).stop) for e in layout.entries]
    )


def exact_fisher(net: LoraNetwork, data, sublayers: Optional[Sequence[str]] = None) -> FullFisher:
    """
    Dense Fisher sum_n sum_c p_c g_nc g_nc^T over the scoped parameters

    Raises:
        TooLarge: More than MAX_EXACT_PARAMS parameters in scope
    """
    layout = _scope_layout(net, sublayers)
    if layout.size > MAX_EXACT_PARAMS:
        raise TooLarge(f"Exact Fisher over {layout.size} parameters exceeds {MAX_EXACT_PARAMS}")
    index = _scope_index(net, layout)
    fisher = np.zeros((layout.size, layout.size))
    for x in np.asarray(data.features, dtype=np.float64):
        rows, p = _per_class_grads(net, x, index)
        fisher += rows.T @ (p[:, None] * rows)
    fisher = 0.5 * (fisher + fisher.T)
    return FullFisher(matrix=fisher, layout=layout, n_data=len(data.features))


def diag_fisher(net: LoraNetwork, data, sublayers: Optional[Sequence[str]] = None) -> DiagFisher:
    layout = _scope_layout(net, sublayers)
    index = _scope_index(net, layout) if layout.entries else np.zeros(0, dtype=int)
    diagonal = np.zeros(layout.size)
    for x in np.asarray(data.features, dtype=np.float64):
        rows, p = _per_class_grads(net, x, index)
        diagonal += p @ (rows * rows)
    return DiagFisher(diagonal=diagonal, layout=layout, n_data=len(data.features))


def incremental_lowrank_update(
    state: LowRankFactor, new_vec: Union[Vector, Matrix], k: int
) -> LowRankFactor:
    """
    Append vectors to a low-rank root and re-truncate to rank k

    Accepts one vector (d,) or a batch of columns (d, m). The result is the
    top-k left singular vectors of [root | new] scaled by their singular
    values, so result @ result.T is the best rank-k approximation of
    root @ root.T + new @ new.T.
    """
    cols = np.asarray(new_vec, dtype=np.float64)
    if cols.ndim == 1:
        cols = cols[:, None]
    if cols.shape[0] != state.dim:
        raise DimMismatch(f"Vector of dim {cols.shape[0]} does not match factor dim {state.dim}")
    stacked = np.hstack([state.root, cols])
    rank = min(k, *stacked.shape)
    u, s = svd_topk(stacked, rank)
    return LowRankFactor(u * s)


class _BlockAccumulator:
    """Running sums for one sublayer"""

    def __init__(self, sid: str, shape: Tuple[int, int], orientation: Orientation, k: int):
        self.sid = sid
        self.shape = shape
        self.orientation = orientation
        self.k = k
        n_out, n_in = shape
        if orientation == Orientation.INPUT_LARGE:
            d_large, n_small = n_in, n_out
        else:
            d_large, n_small = n_out, n_in
        self.small = np.zeros((n_small, n_small))
        self.root = LowRankFactor.empty(d_large)
        self.pending: List[Vector] = []

    def push_large(self, v: Vector, batch: int) -> None:
        self.pending.append(v)
        if len(self.pending) >= batch:
            self.flush()

    def flush(self) -> None:
        if self.pending:
            self.root = incremental_lowrank_update(
                self.root, np.column_stack(self.pending), self.k
            )
            self.pending = []

    def finish(self, n_data: int) -> KfacBlock:
        self.flush()
        small = self.small / max(n_data, 1)
        small = 0.5 * (small + small.T)
        return KfacBlock(
            sublayer=self.sid,
            weight_shape=self.shape,
            orientation=self.orientation,
            small=small,
            small_chol=cholesky(small),
            large_root=self.root,
        )


def accumulate_kfac(
    net: LoraNetwork,
    data,
    n_kfac: int = 10,
    fisher_mode: FisherMode = FisherMode.EXACT,
    seed: int = 0,
    sublayers: Optional[Sequence[str]] = None,
    batch: int = 8,
) -> KfacFisher:
    """
    KFAC Fisher with low-rank large factors

    Args:
        net: Network at the MAP
        data: Dataset with features
        n_kfac: Rank kept for every large factor
        fisher_mode: EXACT weights every class by p_c; MC samples one class
        seed: Label sampling seed for MC mode
        sublayers: Restrict to these sublayer ids (None = all)
        batch: Columns appended per truncated SVD

    Returns:
        KfacFisher with one block per sublayer in scope
    """
    if n_kfac < 1:
        raise ValueError("n_kfac must be at least 1")
    layout = _scope_layout(net, sublayers)
    accs: Dict[str, _BlockAccumulator] = {}
    for entry in layout.entries:
        orientation = Orientation.INPUT_LARGE if entry.kind == "a" else Orientation.OUTPUT_LARGE
        accs[entry.id] = _BlockAccumulator(entry.id, entry.shape, orientation, n_kfac)

    rng = np.random.default_rng(seed)
    features = np.asarray(data.features, dtype=np.float64)
    for x in features:
        trace = forward(net, x)
        p = softmax(trace.logits)
        if fisher_mode == FisherMode.EXACT:
            classes = [(c, float(p[c])) for c in range(net.n_classes)]
        else:
            classes = [(int(rng.choice(net.n_classes, p=p)), 1.0)]

        first = True
        for c, weight in classes:
            grad_logits = p.copy()
            grad_logits[c] -= 1.0
            _, io = backward(net, trace, grad_logits)
            for item in io:
                acc = accs.get(item.sublayer)
                if acc is None:
                    continue
                if acc.orientation == Orientation.INPUT_LARGE:
                    acc.small += weight * np.outer(item.output_grad, item.output_grad)
                    if first:
                        acc.push_large(item.input, batch)
                else:
                    if first:
                        acc.small += np.outer(item.input, item.input)
                    acc.push_large(np.sqrt(weight) * item.output_grad, batch)
            first = False

    blocks = tuple(accs[e.id].finish(len(features)) for e in layout.entries)
    logger.info(
        f"KFAC fitted over {len(blocks)} sublayers, N={len(features)}, n_kfac={n_kfac}, "
        f"mode={FisherMode(fisher_mode).value}"
    )
    return KfacFisher(blocks=blocks, layout=layout, n_data=len(features))


def fit_fisher(
    net: LoraNetwork,
    data,
    variant: FisherVariant,
    sublayers: Optional[Sequence[str]] = None,
    n_kfac: int = 10,
    fisher_mode: FisherMode = FisherMode.EXACT,
    seed: int = 0,
    batch: int = 8,
) -> FisherEstimate:
    """Dispatch on the Fisher variant"""
    variant = FisherVariant(variant)
    if variant == FisherVariant.FULL:
        return exact_fisher(net, data, sublayers)
    if variant == FisherVariant.DIAG:
        return diag_fisher(net, data, sublayers)
    return accumulate_kfac(net, data, n_kfac, fisher_mode, seed, sublayers, batch)
