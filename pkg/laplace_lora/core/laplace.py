"""
Laplace Posterior over LoRA Parameters

Posterior precision P = F + diag(lambda), with lambda one prior precision
per sublayer (all equal unless tuned per sublayer). For KFAC the log
determinant and every solve go through the matrix determinant lemma and the
Woodbury identity on the factor roots:

    F_b = U U^T,  U = L kron B,  M_b = I + (1/lambda_b) (L^T L) kron (B^T B)
    log det(P_b) = D_b log lambda_b + log det(M_b)
    P_b^-1 V = V / lambda_b - U M_b^-1 U^T V / lambda_b^2

where L is the small-factor root and B the large-factor root. Blocks are
handled in large-by-small coordinates so both orientations share one code
path.

Prior precision tuning:
- optimize_prior_evidence: ascent on the Laplace evidence in log lambda
- optimize_prior_valnll: stochastic ascent on validation log-likelihood of
  the linearized Monte Carlo predictive
"""

import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp, softmax

from laplace_lora.config import FisherVariant, Scope, TuningMode
from laplace_lora.core import numeric_text
from laplace_lora.core.curvature import (
    DiagFisher,
    FisherEstimate,
    FullFisher,
    KfacBlock,
    KfacFisher,
    Orientation,
)
from laplace_lora.core.errors import BadConfig, FormatError, LayoutMismatch, NonFinite
from laplace_lora.core.linalg import (
    CholeskyFactor,
    LowRankFactor,
    Matrix,
    Vector,
    cholesky,
    kron,
    logdet,
    unvec,
    vec,
)
from laplace_lora.core.lora_net import (
    LoraNetwork,
    ParamLayout,
    ParamVector,
    SublayerSpec,
    logits_jacobian,
    sublayer_id,
)
from laplace_lora.core.train import log_likelihood
from laplace_lora.data import ensure_tuning_split

logger = logging.getLogger("laplace-lora.laplace")

POSTERIOR_KIND = "curvature"
LOG_2PI = math.log(2.0 * math.pi)
MIN_CURVATURE = 1e-8
MAX_LOG_STEP = 1.0
MIN_DAMPING = 1e-8


def scope_sublayers(
    net: LoraNetwork, scope: Scope, first_layers: int = 1
) -> Optional[Tuple[str, ...]]:
    """Sublayer ids covered by a scope; None means every sublayer"""
    scope = Scope(scope)
    if scope == Scope.LLLA:
        return net.last_layer_ids()
    if scope == Scope.FIRSTK:
        if not 1 <= first_layers <= len(net.layers):
            raise BadConfig(
                f"first_layers must be in [1, {len(net.layers)}], got {first_layers}"
            )
        return tuple(
            sublayer_id(i, kind) for i in range(first_layers) for kind in ("a", "b")
        )
    return None


@dataclass(frozen=True)
class _KfacTerms:
    """Woodbury precompute for one block at fixed lambda"""

    small_root: Matrix
    large_root: Matrix
    m_chol: Optional[CholeskyFactor]


@dataclass(frozen=True)
class BlockDet:
    """Determinant-lemma matrix of one KFAC block and its log-det contribution"""

    sublayer: str
    m: Matrix
    logdet: float


@dataclass(frozen=True)
class LaplacePosterior:
    """
    Gaussian posterior centred at the MAP adapters

    Attributes:
        theta_map: MAP adapters restricted to the scope's sublayers
        fisher: Curvature over the same sublayers
        prior_precision: One lambda > 0 per sublayer, in layout order
        scope: LA (all adapters), LLLA (output-layer adapters) or FIRSTK
            (adapters of the leading layers)
    """

    theta_map: ParamVector
    fisher: FisherEstimate
    prior_precision: Vector
    scope: Scope = Scope.LA

    def __post_init__(self) -> None:
        if self.theta_map.layout.ids != self.fisher.layout.ids:
            raise LayoutMismatch("theta_map and fisher cover different sublayers")
        lam = np.asarray(self.prior_precision, dtype=np.float64)
        if lam.shape != (len(self.sublayers),):
            raise LayoutMismatch(
                f"Expected {len(self.sublayers)} prior precisions, got {lam.shape}"
            )
        if not np.all(lam > 0) or not np.all(np.isfinite(lam)):
            raise ValueError(f"Prior precisions must be finite and positive, got {lam}")
        object.__setattr__(self, "prior_precision", lam)

    @property
    def layout(self) -> ParamLayout:
        return self.fisher.layout

    @property
    def sublayers(self) -> Tuple[str, ...]:
        return self.fisher.layout.ids

    @property
    def variant(self) -> FisherVariant:
        return self.fisher.variant

    @property
    def n_params(self) -> int:
        return self.layout.size

    def with_prior(
        self, prior_precision: Union[float, Sequence[float], Vector]
    ) -> "LaplacePosterior":
        lam = np.broadcast_to(
            np.asarray(prior_precision, dtype=np.float64), (len(self.sublayers),)
        ).copy()
        return replace(self, prior_precision=lam)

    def prior_vector(self) -> Vector:
        """lambda expanded to one entry per parameter"""
        return np.concatenate(
            [np.full(e.size, lam) for e, lam in zip(self.layout.entries, self.prior_precision)]
        )

    def block_lambda(self, sid: str) -> float:
        return float(self.prior_precision[self.sublayers.index(sid)])

    @cached_property
    def _full_chol(self) -> CholeskyFactor:
        assert isinstance(self.fisher, FullFisher)
        return cholesky(self.fisher.matrix + np.diag(self.prior_vector()))

    @cached_property
    def _kfac_terms(self) -> Dict[str, _KfacTerms]:
        assert isinstance(self.fisher, KfacFisher)
        terms = {}
        for blk in self.fisher.blocks:
            lam = self.block_lambda(blk.sublayer)
            small_root = blk.small_root
            large_root = blk.large_root.root
            m_chol = None
            if large_root.shape[1] > 0:
                m = _block_m(small_root, large_root, lam)
                m_chol = cholesky(m)
            terms[blk.sublayer] = _KfacTerms(small_root, large_root, m_chol)
        return terms

    def solve(self, v: Matrix) -> Matrix:
        """P^-1 V for V of shape (D, m) in scope coordinates"""
        v = np.asarray(v, dtype=np.float64)
        if v.ndim == 1:
            return self.solve(v[:, None])[:, 0]
        if v.shape[0] != self.n_params:
            raise LayoutMismatch(f"Expected {self.n_params} rows, got {v.shape[0]}")
        if isinstance(self.fisher, FullFisher):
            return self._full_chol.solve(v)
        if isinstance(self.fisher, DiagFisher):
            return v / (self.fisher.diagonal + self.prior_vector())[:, None]

        out = np.empty_like(v)
        for blk in self.fisher.blocks:
            sl = self.layout.slice(blk.sublayer)
            out[sl] = _kfac_block_solve(
                blk, self._kfac_terms[blk.sublayer], self.block_lambda(blk.sublayer), v[sl]
            )
        return out

    def covariance_dense(self) -> Matrix:
        """Sigma = P^-1 as a dense matrix; small scopes only"""
        return self.solve(np.eye(self.n_params))


def _block_m(small_root: Matrix, large_root: Matrix, lam: float) -> Matrix:
    n = small_root.shape[1] * large_root.shape[1]
    return np.eye(n) + kron(small_root.T @ small_root, large_root.T @ large_root) / lam


def _kfac_block_solve(blk: KfacBlock, terms: _KfacTerms, lam: float, v: Matrix) -> Matrix:
    rows, cols = blk.weight_shape
    mats = np.stack([unvec(v[:, j], rows, cols) for j in range(v.shape[1])])
    if blk.orientation == Orientation.INPUT_LARGE:
        mats = mats.transpose(0, 2, 1)
    result = mats / lam
    if terms.m_chol is not None:
        small, large = terms.small_root, terms.large_root
        projected = np.einsum("dk,mds,sr->mkr", large, mats, small)
        flat = np.stack([vec(p) for p in projected], axis=1)
        solved = terms.m_chol.solve(flat)
        k, r = large.shape[1], small.shape[1]
        back = np.stack(
            [large @ unvec(solved[:, j], k, r) @ small.T for j in range(solved.shape[1])]
        )
        result = result - back / lam**2
    if blk.orientation == Orientation.INPUT_LARGE:
        result = result.transpose(0, 2, 1)
    return np.stack([vec(m) for m in result], axis=1)


def build_posterior(
    net: LoraNetwork,
    fisher: FisherEstimate,
    scope: Scope = Scope.LA,
    prior_precision: Union[float, Sequence[float]] = 1.0,
) -> LaplacePosterior:
    """Posterior at the network's current adapters over the fisher's sublayers"""
    theta = net.get_params().restrict(fisher.layout.ids)
    lam = np.broadcast_to(
        np.asarray(prior_precision, dtype=np.float64), (len(fisher.layout.ids),)
    ).copy()
    return LaplacePosterior(theta_map=theta, fisher=fisher, prior_precision=lam, scope=scope)


def block_dets(post: LaplacePosterior) -> List[BlockDet]:
    """Determinant-lemma matrices of every KFAC block"""
    if not isinstance(post.fisher, KfacFisher):
        return []
    out = []
    for blk in post.fisher.blocks:
        terms = post._kfac_terms[blk.sublayer]
        lam = post.block_lambda(blk.sublayer)
        if terms.m_chol is None:
            m = np.zeros((0, 0))
            contribution = blk.size * math.log(lam)
        else:
            m = _block_m(terms.small_root, terms.large_root, lam)
            contribution = blk.size * math.log(lam) + logdet(terms.m_chol)
        out.append(BlockDet(sublayer=blk.sublayer, m=m, logdet=contribution))
    return out


def posterior_logdet(post: LaplacePosterior) -> float:
    """log det of the posterior precision"""
    if isinstance(post.fisher, FullFisher):
        value = logdet(post._full_chol)
    elif isinstance(post.fisher, DiagFisher):
        value = float(np.sum(np.log(post.fisher.diagonal + post.prior_vector())))
    else:
        value = float(sum(d.logdet for d in block_dets(post)))
    if not math.isfinite(value):
        raise NonFinite("Posterior log-determinant is not finite")
    return value


def log_prior(post: LaplacePosterior) -> float:
    """Full Gaussian log density of theta_map under the per-sublayer prior"""
    total = 0.0
    for entry, lam in zip(post.layout.entries, post.prior_precision):
        theta = post.theta_map.theta[post.layout.slice(entry.id)]
        total += 0.5 * entry.size * (math.log(lam) - LOG_2PI) - 0.5 * lam * float(theta @ theta)
    return total


def log_marginal_likelihood(post: LaplacePosterior, train_loglik_at_map: float) -> float:
    """
    Laplace evidence

    log p(D) ~ log p(D | theta_map) + log p(theta_map) + (D/2) log 2pi
               - (1/2) log det P
    """
    return (
        train_loglik_at_map
        + log_prior(post)
        + 0.5 * post.n_params * LOG_2PI
        - 0.5 * posterior_logdet(post)
    )


@dataclass
class TuningResult:
    """
    Outcome of prior-precision tuning

    Attributes:
        prior_precision: Selected lambda per sublayer
        posterior: Posterior carrying the selected lambda
        history: Objective value per evaluation (evidence, or validation NLL)
        initial: Objective at the initial lambda
        best: Objective at the selected lambda
        mode: Tuning mode that produced it
    """

    prior_precision: Vector
    posterior: LaplacePosterior
    history: List[float] = field(default_factory=list)
    initial: float = float("nan")
    best: float = float("nan")
    mode: TuningMode = TuningMode.FIXED


def _groups(post: LaplacePosterior, per_sublayer: bool) -> List[List[int]]:
    n = len(post.sublayers)
    return [[i] for i in range(n)] if per_sublayer else [list(range(n))]


def _param_index(post: LaplacePosterior, i: int) -> np.ndarray:
    sl = post.layout.slice(post.sublayers[i])
    return np.arange(sl.start, sl.stop)


def _theta_sq(post: LaplacePosterior, i: int) -> float:
    theta = post.theta_map.theta[post.layout.slice(post.sublayers[i])]
    return float(theta @ theta)


def evidence_gradient(
    post: LaplacePosterior, per_sublayer: bool = False
) -> Tuple[Vector, Vector]:
    """
    Derivative and second derivative of the evidence in log lambda

    Returns one (gradient, curvature) pair per tuning group: every sublayer
    when per_sublayer, otherwise a single group holding all of them. The
    curvature is the diagonal of the Hessian over groups.
    """
    groups = _groups(post, per_sublayer)
    grad = np.zeros(len(groups))
    hess = np.zeros(len(groups))

    full_inv = None
    if isinstance(post.fisher, FullFisher):
        full_inv = post.covariance_dense()

    for gi, members in enumerate(groups):
        idx = np.concatenate(
            [_param_index(post, i) for i in members]
        )
        for i in members:
            lam = float(post.prior_precision[i])
            quad = 0.5 * lam * _theta_sq(post, i)
            grad[gi] -= quad
            hess[gi] -= quad
            sid = post.sublayers[i]
            if isinstance(post.fisher, DiagFisher):
                f = post.fisher.diagonal[post.layout.slice(sid)]
                grad[gi] += 0.5 * f.size - 0.5 * float(np.sum(lam / (f + lam)))
                hess[gi] -= 0.5 * float(np.sum(lam * f / (f + lam) ** 2))
            elif isinstance(post.fisher, KfacFisher):
                kappa = _kfac_eigenvalues(post.fisher.block(sid))
                grad[gi] += 0.5 * float(np.sum(kappa / (lam + kappa)))
                hess[gi] -= 0.5 * float(np.sum(kappa * lam / (lam + kappa) ** 2))
            else:
                sl = post.layout.slice(sid)
                grad[gi] += 0.5 * (sl.stop - sl.start)
                grad[gi] -= 0.5 * lam * float(np.trace(full_inv[sl, sl]))
                hess[gi] -= 0.5 * lam * float(np.trace(full_inv[sl, sl]))
        if full_inv is not None:
            lam = float(post.prior_precision[members[0]])
            sub = full_inv[np.ix_(idx, idx)]
            hess[gi] += 0.5 * lam**2 * float(np.sum(sub * sub))
    return grad, hess


def _kfac_eigenvalues(blk: KfacBlock) -> Vector:
    """Non-trivial eigenvalues of the block: products of factor Gram spectra"""
    if blk.large_root.rank == 0:
        return np.zeros(0)
    small = np.clip(np.linalg.eigvalsh(blk.small), 0.0, None)
    large = np.clip(np.linalg.eigvalsh(blk.large_root.gram()), 0.0, None)
    return np.outer(small, large).ravel()


def optimize_prior_evidence(
    post: LaplacePosterior,
    net: LoraNetwork,
    data,
    eta: float = 0.1,
    steps: int = 100,
    per_sublayer: bool = False,
    grad_tol: float = 1e-6,
) -> TuningResult:
    """
    Tune lambda on the training-set evidence

    Damped Newton ascent on rho = log lambda: each step moves rho by the
    current damping times gradient over |curvature|, capped at MAX_LOG_STEP.
    The damping starts at eta, doubles (up to a full Newton step) after
    every step that does not lower the evidence and halves on a rejected
    step. Iteration stops once every gradient component is below grad_tol,
    the damping underflows or the step budget runs out. Only non-decreasing steps are taken, so
    the result never scores below the start.

    Raises:
        SplitLeakage: data is tagged as test data
    """
    ensure_tuning_split(data)
    loglik = log_likelihood(net, data.features, data.labels)
    groups = _groups(post, per_sublayer)
    rho = np.log(np.array([post.prior_precision[g[0]] for g in groups]))

    def expand(r: Vector) -> Vector:
        lam = np.empty(len(post.sublayers))
        for gi, members in enumerate(groups):
            lam[members] = math.exp(r[gi])
        return lam

    current = post.with_prior(expand(rho))
    initial = log_marginal_likelihood(current, loglik)
    best = initial
    history = [initial]
    damping = min(eta, 1.0)
    g, h = evidence_gradient(current, per_sublayer)

    for step in range(1, steps + 1):
        if np.max(np.abs(g)) < grad_tol or damping < MIN_DAMPING:
            logger.debug(
                f"evidence tuning done after {step - 1} steps, |grad|={np.abs(g).max():.2e}"
            )
            break
        step_size = damping * g / np.maximum(np.abs(h), MIN_CURVATURE)
        delta = np.clip(step_size, -MAX_LOG_STEP, MAX_LOG_STEP)
        candidate_rho = rho + delta
        try:
            candidate = post.with_prior(expand(candidate_rho))
            value = log_marginal_likelihood(candidate, loglik)
        except (NonFinite, ValueError, OverflowError) as e:
            logger.warning(f"⚠️ Evidence tuning stopped at step {step}: {e}")
            break
        if not math.isfinite(value):
            logger.warning(f"⚠️ Non-finite evidence at step {step}, keeping best so far")
            break
        if value < best:
            damping *= 0.5
            logger.debug(f"evidence step {step} rejected, damping -> {damping:.3g}")
            continue
        rho, current, best = candidate_rho, candidate, value
        damping = min(2.0 * damping, 1.0)
        g, h = evidence_gradient(current, per_sublayer)
        history.append(value)
        logger.debug(f"evidence step {step}: lambda={np.exp(rho)} evidence={value:.6f}")

    lam = expand(rho)
    logger.info(
        f"✅ Evidence tuning: lambda {post.prior_precision.tolist()} -> {lam.tolist()}, "
        f"evidence {initial:.4f} -> {best:.4f}"
    )
    return TuningResult(
        prior_precision=lam,
        posterior=post.with_prior(lam),
        history=history,
        initial=initial,
        best=best,
        mode=TuningMode.EVIDENCE,
    )


@dataclass
class ValidationCache:
    """Logits and scoped Jacobians of every validation example at the MAP"""

    mus: Matrix
    jacobians: np.ndarray
    labels: np.ndarray

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])


def precompute_validation(net: LoraNetwork, post: LaplacePosterior, data) -> ValidationCache:
    ensure_tuning_split(data)
    features = np.asarray(data.features, dtype=np.float64)
    if features.shape[0] == 0:
        raise ValueError("Validation data is empty")
    mus = np.zeros((features.shape[0], net.n_classes))
    jacs = np.zeros((features.shape[0], net.n_classes, post.n_params))
    for n, x in enumerate(features):
        jac = logits_jacobian(net, x)
        mus[n] = jac.logits
        jacs[n] = jac.dense(post.sublayers)
    return ValidationCache(mus=mus, jacobians=jacs, labels=np.asarray(data.labels))


def _logit_cov(post: LaplacePosterior, jac: Matrix) -> Tuple[Matrix, Matrix]:
    """Lambda = J P^-1 J^T and S = P^-1 J^T"""
    s = post.solve(jac.T)
    cov = jac @ s
    return 0.5 * (cov + cov.T), s


def validation_nll(
    post: LaplacePosterior, cache: ValidationCache, n_samples: int = 100, seed: int = 0
) -> float:
    """Mean NLL of the MC-joint predictive with common random numbers"""
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((cache.size, n_samples, cache.mus.shape[1]))
    total = 0.0
    for n in range(cache.size):
        cov, _ = _logit_cov(post, cache.jacobians[n])
        chol = cholesky(cov)
        logits = cache.mus[n] + xi[n] @ chol.lower.T
        probs = softmax(logits, axis=1).mean(axis=0)
        total -= math.log(max(float(probs[cache.labels[n]]), 1e-12))
    return total / cache.size


def _phi(x: Matrix) -> Matrix:
    out = np.tril(x)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def _valnll_gradient(
    post: LaplacePosterior,
    cache: ValidationCache,
    batch: np.ndarray,
    groups: List[List[int]],
    xi: np.ndarray,
) -> Tuple[float, Vector]:
    """Minibatch log-likelihood of the reparameterized predictive and its rho-gradient"""
    value = 0.0
    grad = np.zeros(len(groups))
    for b, n in enumerate(batch):
        cov, s = _logit_cov(post, cache.jacobians[n])
        chol = cholesky(cov)
        lower = chol.lower
        logits = cache.mus[n] + xi[b] @ lower.T
        y = int(cache.labels[n])
        log_p = logits[:, y] - logsumexp(logits, axis=1)
        value += float(logsumexp(log_p) - math.log(len(log_p)))
        weights = np.exp(log_p - logsumexp(log_p))
        d_logits = weights[:, None] * (np.eye(logits.shape[1])[y] - softmax(logits, axis=1))
        d_lower = d_logits.T @ xi[b]

        lower_inv = np.linalg.inv(lower)
        for gi, members in enumerate(groups):
            d_cov = np.zeros_like(cov)
            for i in members:
                sl = post.layout.slice(post.sublayers[i])
                s_b = s[sl]
                d_cov -= float(post.prior_precision[i]) * (s_b.T @ s_b)
            dl = lower @ _phi(lower_inv @ d_cov @ lower_inv.T)
            grad[gi] += float(np.sum(d_lower * dl))
    return value / len(batch), grad / len(batch)


def optimize_prior_valnll(
    post: LaplacePosterior,
    net: LoraNetwork,
    data,
    eta: float = 0.1,
    steps: int = 1000,
    batch: int = 4,
    mc_samples: int = 1,
    seed: int = 0,
    eval_every: int = 50,
    eval_samples: int = 100,
    per_sublayer: bool = False,
    cache: Optional[ValidationCache] = None,
) -> TuningResult:
    """
    Tune lambda on validation log-likelihood

    Stochastic gradient ascent in rho = log lambda. Each step samples a
    minibatch and fresh standard-normal draws; the gradient flows through the
    Cholesky factor of the logit covariance. The full validation NLL is
    scored at the start and every eval_every steps with fixed draws, and the
    lambda with the lowest score is returned. A step producing a non-finite
    value is rolled back.

    Raises:
        SplitLeakage: data is tagged as test data
    """
    if cache is None:
        cache = precompute_validation(net, post, data)
    groups = _groups(post, per_sublayer)
    rng = np.random.default_rng(seed)
    eval_seed = int(rng.integers(0, 2**31 - 1))
    rho = np.log(np.array([post.prior_precision[g[0]] for g in groups]))

    def expand(r: Vector) -> Vector:
        lam = np.empty(len(post.sublayers))
        for gi, members in enumerate(groups):
            lam[members] = math.exp(r[gi])
        return lam

    current = post.with_prior(expand(rho))
    initial = validation_nll(current, cache, eval_samples, eval_seed)
    best, best_rho = initial, rho.copy()
    history = [initial]
    batch_size = min(batch, cache.size)
    n_classes = cache.mus.shape[1]

    for step in range(1, steps + 1):
        idx = rng.choice(cache.size, size=batch_size, replace=False)
        xi = rng.standard_normal((batch_size, mc_samples, n_classes))
        try:
            value, grad = _valnll_gradient(current, cache, idx, groups, xi)
            candidate_rho = rho + eta * grad
            candidate = post.with_prior(expand(candidate_rho))
        except (NonFinite, ValueError, OverflowError, np.linalg.LinAlgError) as e:
            logger.warning(f"⚠️ Rolled back validation step {step}: {e}")
            continue
        if not (math.isfinite(value) and np.all(np.isfinite(candidate_rho))):
            logger.warning(f"⚠️ Rolled back non-finite validation step {step}")
            continue
        rho, current = candidate_rho, candidate

        if step % eval_every == 0 or step == steps:
            score = validation_nll(current, cache, eval_samples, eval_seed)
            history.append(score)
            if score < best:
                best, best_rho = score, rho.copy()
            logger.debug(f"valnll step {step}: lambda={np.exp(rho)} nll={score:.6f}")

    lam = expand(best_rho)
    logger.info(
        f"✅ Validation tuning: lambda {post.prior_precision.tolist()} -> {lam.tolist()}, "
        f"val NLL {initial:.4f} -> {best:.4f}"
    )
    return TuningResult(
        prior_precision=lam,
        posterior=post.with_prior(lam),
        history=history,
        initial=initial,
        best=best,
        mode=TuningMode.VALNLL,
    )


def _parse_kind(sid: str) -> Tuple[int, str]:
    try:
        layer_part, kind_part = sid.split(".")
        return int(layer_part.replace("layer", "")), kind_part.replace("lora_", "")
    except ValueError as e:
        raise FormatError(f"Bad sublayer id '{sid}'") from e


def save_posterior(
    post: LaplacePosterior, path: Union[str, Path], tuning: TuningMode = TuningMode.FIXED
) -> Path:
    doc = numeric_text.NumericDocument(kind=POSTERIOR_KIND)
    doc.header = {
        "variant": post.variant.value,
        "scope": Scope(post.scope).value,
        "sublayers": ",".join(post.sublayers),
        "shapes": ",".join(f"{e.shape[0]}x{e.shape[1]}" for e in post.layout.entries),
        "n_data": str(post.fisher.n_data),
        "prior_precision": ",".join("%.17g" % v for v in post.prior_precision),
        "tuning": TuningMode(tuning).value,
    }
    doc.blocks["theta_map"] = post.theta_map.theta[None, :]
    if isinstance(post.fisher, FullFisher):
        doc.blocks["fisher"] = post.fisher.matrix
    elif isinstance(post.fisher, DiagFisher):
        doc.blocks["fisher"] = post.fisher.diagonal[None, :]
    else:
        doc.header["orientation"] = ",".join(b.orientation.value for b in post.fisher.blocks)
        doc.header["small_jitter"] = ",".join(
            "%.17g" % b.small_chol.jitter for b in post.fisher.blocks
        )
        for blk in post.fisher.blocks:
            doc.blocks[f"{blk.sublayer}.small"] = blk.small
            doc.blocks[f"{blk.sublayer}.small_chol"] = blk.small_chol.lower
            doc.blocks[f"{blk.sublayer}.large_root"] = blk.large_root.root
    return numeric_text.save(doc, path)


def load_posterior(path: Union[str, Path]) -> Tuple[LaplacePosterior, TuningMode]:
    doc = numeric_text.load(path, POSTERIOR_KIND)
    try:
        variant = FisherVariant(doc.require("variant"))
        scope = Scope(doc.require("scope"))
        ids = [s for s in doc.require("sublayers").split(",") if s]
        shapes = [tuple(int(v) for v in s.split("x")) for s in doc.require("shapes").split(",")]
        n_data = int(doc.require("n_data"))
        lam = np.array([float(v) for v in doc.require("prior_precision").split(",")])
        tuning = TuningMode(doc.header.get("tuning", "fixed"))
    except ValueError as e:
        raise FormatError(f"Bad curvature header: {e}") from e
    if len(shapes) != len(ids):
        raise FormatError("Curvature header lists mismatched sublayers and shapes")

    entries, offset = [], 0
    for sid, shape in zip(ids, shapes):
        layer, kind = _parse_kind(sid)
        entries.append(SublayerSpec(sid, layer, kind, offset, (shape[0], shape[1])))
        offset += shape[0] * shape[1]
    layout = ParamLayout(tuple(entries))
    theta = ParamVector(doc.block("theta_map").ravel(), layout)

    fisher: FisherEstimate
    if variant == FisherVariant.FULL:
        fisher = FullFisher(matrix=doc.block("fisher"), layout=layout, n_data=n_data)
    elif variant == FisherVariant.DIAG:
        fisher = DiagFisher(diagonal=doc.block("fisher").ravel(), layout=layout, n_data=n_data)
    else:
        orientations = doc.require("orientation").split(",")
        try:
            jitters = [float(v) for v in doc.require("small_jitter").split(",")]
        except ValueError as e:
            raise FormatError(f"Bad small_jitter header: {e}") from e
        if not len(orientations) == len(jitters) == len(entries):
            raise FormatError("Curvature header lists mismatched KFAC blocks")
        blocks = []
        for entry, orient, jitter in zip(entries, orientations, jitters):
            small = doc.block(f"{entry.id}.small")
            lower = doc.block(f"{entry.id}.small_chol")
            blocks.append(
                KfacBlock(
                    sublayer=entry.id,
                    weight_shape=entry.shape,
                    orientation=Orientation(orient),
                    small=small,
                    small_chol=CholeskyFactor(lower=lower, jitter=jitter),
                    large_root=LowRankFactor(doc.block(f"{entry.id}.large_root")),
                )
            )
        fisher = KfacFisher(blocks=tuple(blocks), layout=layout, n_data=n_data)
    post = LaplacePosterior(theta_map=theta, fisher=fisher, prior_precision=lam, scope=scope)
    return post, tuning
