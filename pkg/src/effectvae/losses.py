"""Training objective terms.

Five ingredients assemble the per-batch objective:

* reconstruction (Gaussian NLL for continuous columns, cross-entropy for
  binary columns),
* closed-form KL from the diagonal-Gaussian posterior to the standard
  normal prior,
* joint inference loss supervising the assignment dim and the factual
  outcome dim,
* total correlation of the aggregate posterior, estimated by minibatch
  weighted sampling,
* per-free-dim cross-group distribution matching (kernel MMD by default,
  with linear-MMD, 1-D Wasserstein, and symmetrized-Gaussian-KL variants).

total = recon + alpha * supervised + kl_prior + beta * tc
        + beta * gamma * mmd_sum
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DataError
from .model import BINARY, Posterior, TreatmentVae

LOG_2PI = math.log(2.0 * math.pi)
_PROB_EPS = 1e-12
_VAR_FLOOR = 1e-6

MATCH_KINDS = ("kernel_mmd", "linear_mmd", "wasserstein_1d", "gaussian_kl")


@dataclass(frozen=True)
class MatchStrategy:
    """Cross-group distribution penalty selector."""

    kind: str = "kernel_mmd"
    bandwidths: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if self.kind not in MATCH_KINDS:
            raise ContractError(f"unknown match strategy {self.kind!r}")
        if self.bandwidths is not None:
            if len(self.bandwidths) == 0:
                raise ContractError("kernel_mmd needs at least one bandwidth")
            if any(b <= 0 for b in self.bandwidths):
                raise ContractError("bandwidths must be positive")


@dataclass
class LossReport:
    """Itemized per-batch objective, all entries batch means."""

    recon: float
    kl_prior: float
    supervised: float
    tc: float
    mmd_sum: float
    total: float

    def as_dict(self) -> dict:
        return {
            "recon": self.recon,
            "kl_prior": self.kl_prior,
            "supervised": self.supervised,
            "tc": self.tc,
            "mmd_sum": self.mmd_sum,
            "total": self.total,
        }


# -- elementary terms ------------------------------------------------------


def recon_loss(x, recon: Tensor, feature_spec: Sequence[str]) -> Tensor:
    """Reconstruction negative log-likelihood: mean over batch, sum over columns.

    Continuous cells contribute 0.5 * (x - xhat)^2 (unit-variance Gaussian,
    additive constant dropped); binary cells contribute cross-entropy.
    """
    x = ad.as_tensor(x)
    if x.shape != recon.shape:
        raise ContractError(f"input {x.shape} and reconstruction {recon.shape} disagree")
    if x.shape[0] == 0:
        return Tensor(0.0)
    binary = np.array([kind == BINARY for kind in feature_spec])
    if binary.any():
        probs = recon.data[:, binary]
        if probs.size and (probs.min() < 0.0 or probs.max() > 1.0):
            raise ContractError("binary-column reconstruction outside [0, 1]")
    mask = Tensor(binary.astype(np.float64))
    sq = ad.mul(ad.square(ad.sub(x, recon)), 0.5)
    p = ad.clamp(recon, _PROB_EPS, 1.0 - _PROB_EPS)
    ce = ad.neg(
        ad.add(
            ad.mul(x, ad.log(p)),
            ad.mul(ad.sub(1.0, x), ad.log(ad.sub(1.0, p))),
        )
    )
    cells = ad.add(ad.mul(sq, ad.sub(1.0, mask)), ad.mul(ce, mask))
    return ad.reduce_sum(ad.reduce_mean(cells, axis=0))


def kl_prior(post: Posterior) -> Tensor:
    """KL(q(z|x) || N(0, I)) in closed form, mean over the batch."""
    if post.n == 0:
        return Tensor(0.0)
    var = ad.exp(post.logvar)
    cells = ad.mul(
        ad.sub(ad.add(ad.square(post.mu), var), ad.add(1.0, post.logvar)),
        0.5,
    )
    return ad.reduce_sum(ad.reduce_mean(cells, axis=0))


def _binary_ce_from_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    # softplus(l) - t * l == -log sigmoid(l) for t=1, -log(1-sigmoid(l)) for t=0
    return ad.sub(ad.softplus(logits), ad.mul(logits, Tensor(targets)))


def supervised_loss(z: Tensor, w: np.ndarray, y: np.ndarray, model: TreatmentVae) -> Tensor:
    """Joint inference loss on the assignment dim and the factual-outcome dim.

    The counterfactual dim receives no supervision.  Assignment is always
    cross-entropy on the dim-1 logit; the factual outcome uses
    cross-entropy in binary mode and squared error in continuous mode.
    """
    w = np.asarray(w, dtype=np.int64)
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] != z.shape[0] or w.shape[0] != z.shape[0]:
        raise ContractError("z, w, y must have matching row counts")
    if np.any(~np.isfinite(y)):
        raise DataError("factual outcome missing for at least one row")
    n = z.shape[0]
    if n == 0:
        return Tensor(0.0)
    layout = model.layout
    assign_logits = z[:, layout.assignment]
    outcome_vals = z[(np.arange(n), layout.factual_outcome_cols(w))]
    assign_term = _binary_ce_from_logits(assign_logits, w.astype(np.float64))
    if model.outcome_mode == BINARY:
        outcome_term = _binary_ce_from_logits(outcome_vals, y)
    else:
        outcome_term = ad.square(ad.sub(outcome_vals, Tensor(y)))
    return ad.reduce_mean(ad.add(assign_term, outcome_term))


# -- aggregate-posterior total correlation ---------------------------------


def _component_log_densities(post: Posterior, z: Tensor, dims: Sequence[int]) -> Tensor:
    """log N(z_i^k ; mu_j^k, var_j^k) for all (i, j, k): shape (M, M, len(dims))."""
    cols = np.asarray(dims, dtype=np.int64)
    key = (slice(None), cols)
    z_i = ad.reshape(z[key], (z.shape[0], 1, len(dims)))
    mu_j = ad.reshape(post.mu[key], (1, post.n, len(dims)))
    lv_j = ad.reshape(post.logvar[key], (1, post.n, len(dims)))
    diff = ad.sub(z_i, mu_j)
    quad = ad.mul(ad.square(diff), ad.exp(ad.neg(lv_j)))
    return ad.mul(ad.add(ad.add(quad, lv_j), LOG_2PI), -0.5)


def _validate_dims(dims: Sequence[int], d: int) -> list[int]:
    dims = list(dims)
    if len(dims) == 0:
        raise ContractError("dims must be non-empty")
    if len(set(dims)) != len(dims):
        raise ContractError("dims must be distinct")
    if any(k < 0 or k >= d for k in dims):
        raise ContractError(f"dims {dims} out of range for latent size {d}")
    return dims


def tc_estimate(post: Posterior, z: Tensor, dataset_size: int, dims: Sequence[int]) -> Tensor:
    """Minibatch-weighted-sampling estimate of aggregate-posterior total correlation.

    E_z[log q(z_dims) - sum_k log q(z^k)], with the batch's components
    importance-weighted by 1/(N*M).  A single dimension has zero total
    correlation by definition.
    """
    if post.n < 2:
        raise ContractError(f"total-correlation estimate needs a batch of >= 2, got {post.n}")
    dims = _validate_dims(dims, post.d)
    if len(dims) == 1:
        return Tensor(0.0)
    log_nm = math.log(float(dataset_size) * post.n)
    dens = _component_log_densities(post, z, dims)
    lse_joint = ad.logsumexp(ad.reduce_sum(dens, axis=2), axis=1)
    lse_marginals = ad.reduce_sum(ad.logsumexp(dens, axis=1), axis=1)
    gap = ad.reduce_mean(ad.sub(lse_joint, lse_marginals))
    return ad.add(gap, (len(dims) - 1) * log_nm)


def mutual_info_estimate(
    post: Posterior, z: Tensor, dataset_size: int, dim_a: int, dims_b: Sequence[int]
) -> Tensor:
    """Same estimator family, for I(z^a ; z^B) under the aggregate posterior."""
    if post.n < 2:
        raise ContractError(f"mutual-information estimate needs a batch of >= 2, got {post.n}")
    dims_b = _validate_dims(dims_b, post.d)
    if dim_a in dims_b:
        raise ContractError(f"dim {dim_a} appears in both groups")
    _validate_dims([dim_a], post.d)
    log_nm = math.log(float(dataset_size) * post.n)
    dens = _component_log_densities(post, z, [dim_a] + dims_b)
    lse_ab = ad.logsumexp(ad.reduce_sum(dens, axis=2), axis=1)
    lse_a = ad.logsumexp(dens[:, :, 0], axis=1)
    lse_b = ad.logsumexp(ad.reduce_sum(dens[:, :, 1:], axis=2), axis=1)
    gap = ad.reduce_mean(ad.sub(ad.sub(lse_ab, lse_a), lse_b))
    return ad.add(gap, log_nm)


def gaussian_tc_closed_form(cov: np.ndarray, dims: Sequence[int]) -> float:
    """Analytic total correlation of a joint Gaussian over the given dims."""
    dims = list(dims)
    sub = np.asarray(cov)[np.ix_(dims, dims)]
    if len(dims) == 1:
        return 0.0
    sign, logdet = np.linalg.slogdet(sub)
    return float(0.5 * (np.sum(np.log(np.diag(sub))) - logdet))


def gaussian_mi_closed_form(cov: np.ndarray, dims_a: Sequence[int], dims_b: Sequence[int]) -> float:
    """Analytic mutual information between two dim groups of a joint Gaussian."""
    dims_a, dims_b = list(dims_a), list(dims_b)
    cov = np.asarray(cov)
    both = dims_a + dims_b
    ld = lambda idx: np.linalg.slogdet(cov[np.ix_(idx, idx)])[1]
    return float(0.5 * (ld(dims_a) + ld(dims_b) - ld(both)))


# -- cross-group distribution matching --------------------------------------


def median_heuristic_bandwidths(values: np.ndarray) -> tuple[float, ...]:
    """Multi-scale kernel widths from the batch's median pairwise distance."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        return (0.5, 1.0, 2.0, 4.0)
    diffs = np.abs(v[:, None] - v[None, :])
    med = float(np.median(diffs[np.triu_indices(v.size, k=1)]))
    if med <= 0.0:
        med = 1.0
    return tuple(c * med for c in (0.5, 1.0, 2.0, 4.0))


def _rbf_mmd2(a: Tensor, b: Tensor, bandwidths: Sequence[float]) -> Tensor:
    m, n = a.shape[0], b.shape[0]
    av, bv = ad.reshape(a, (m, 1)), ad.reshape(b, (n, 1))
    d_aa = ad.square(ad.sub(av, ad.reshape(a, (1, m))))
    d_bb = ad.square(ad.sub(bv, ad.reshape(b, (1, n))))
    d_ab = ad.square(ad.sub(av, ad.reshape(b, (1, n))))
    parts = []
    for bw in bandwidths:
        scale = -0.5 / (bw * bw)
        k_aa = ad.reduce_mean(ad.exp(ad.mul(d_aa, scale)))
        k_bb = ad.reduce_mean(ad.exp(ad.mul(d_bb, scale)))
        k_ab = ad.reduce_mean(ad.exp(ad.mul(d_ab, scale)))
        parts.append(ad.sub(ad.add(k_aa, k_bb), ad.mul(k_ab, 2.0)))
    return ad.relu(ad.concat_scalars(parts))


def _sorted_quantiles(values: Tensor, levels: np.ndarray) -> Tensor:
    """Evaluate the empirical quantile function at the given levels.

    Sample i of a sorted size-n vector sits at level (i + 0.5) / n; linear
    interpolation in between, flat beyond the extremes.  The sort order is
    treated as a constant, so gradients flow through the gathered values.
    """
    n = values.shape[0]
    order = np.argsort(values.data, kind="stable")
    s = values[order]
    pos = np.clip(levels * n - 0.5, 0.0, n - 1.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    return ad.add(ad.mul(s[lo], Tensor(1.0 - frac)), ad.mul(s[hi], Tensor(frac)))


def _wasserstein_1d(a: Tensor, b: Tensor) -> Tensor:
    k = max(a.shape[0], b.shape[0])
    levels = (np.arange(k) + 0.5) / k
    qa = _sorted_quantiles(a, levels)
    qb = _sorted_quantiles(b, levels)
    return ad.reduce_mean(ad.absolute(ad.sub(qa, qb)))


def _fit_gaussian(a: Tensor) -> tuple[Tensor, Tensor]:
    mu = ad.reduce_mean(a)
    var = ad.reduce_mean(ad.square(ad.sub(a, mu)))
    floored = ad.add(ad.relu(ad.sub(var, _VAR_FLOOR)), _VAR_FLOOR)
    return mu, floored


def _gaussian_kl_sym(a: Tensor, b: Tensor) -> Tensor:
    mu_a, var_a = _fit_gaussian(a)
    mu_b, var_b = _fit_gaussian(b)

    def kl(mu1, var1, mu2, var2):
        return ad.mul(
            ad.sub(
                ad.add(ad.log(ad.div(var2, var1)), ad.div(ad.add(var1, ad.square(ad.sub(mu1, mu2))), var2)),
                1.0,
            ),
            0.5,
        )

    sym = ad.mul(ad.add(kl(mu_a, var_a, mu_b, var_b), kl(mu_b, var_b, mu_a, var_a)), 0.5)
    return ad.relu(sym)


def match_penalty(strategy: MatchStrategy, samples_a, samples_b) -> Tensor:
    """Distance between one latent dim's control-group and treated-group values.

    Zero for identical multisets under every strategy; symmetric in the
    two groups.  Callers must skip the penalty when a batch lacks a group.
    """
    a, b = ad.as_tensor(samples_a), ad.as_tensor(samples_b)
    if a.ndim != 1 or b.ndim != 1:
        raise ContractError("match_penalty expects 1-D sample vectors")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ContractError("match_penalty requires both groups non-empty")
    if strategy.kind == "kernel_mmd":
        bandwidths = strategy.bandwidths
        if bandwidths is None:
            bandwidths = median_heuristic_bandwidths(
                np.concatenate([a.data, b.data])
            )
        return _rbf_mmd2(a, b, bandwidths)
    if strategy.kind == "linear_mmd":
        return ad.square(ad.sub(ad.reduce_mean(a), ad.reduce_mean(b)))
    if strategy.kind == "wasserstein_1d":
        return _wasserstein_1d(a, b)
    return _gaussian_kl_sym(a, b)


# -- assembled objectives ----------------------------------------------------


def _free_dim_penalties(
    z: Tensor, w: np.ndarray, strategy: MatchStrategy, free_dims: Sequence[int]
) -> Tensor:
    """Sum of per-free-dim penalties; zero when a batch lacks a group."""
    w = np.asarray(w)
    control = np.flatnonzero(w == 0)
    treated = np.flatnonzero(w == 1)
    if control.size == 0 or treated.size == 0:
        return Tensor(0.0)
    parts = []
    for j in free_dims:
        col = z[:, j]
        parts.append(match_penalty(strategy, col[control], col[treated]))
    return ad.concat_scalars(parts)


def db_loss(
    post: Posterior,
    z: Tensor,
    w: np.ndarray,
    strategy: MatchStrategy,
    gamma: float,
    dataset_size: int,
    free_dims: Optional[Sequence[int]] = None,
) -> Tensor:
    """Distribution-balancing term: full-latent TC plus weighted matching sum."""
    d = post.d
    if free_dims is None:
        free_dims = range(3, d)
    tc = tc_estimate(post, z, dataset_size, range(d))
    mmd = _free_dim_penalties(z, w, strategy, free_dims)
    return ad.add(tc, ad.mul(mmd, gamma))


def total_loss(
    model: TreatmentVae,
    x,
    w: np.ndarray,
    y: np.ndarray,
    noise,
    strategy: MatchStrategy,
    alpha: float,
    beta: float,
    gamma: float,
    dataset_size: int,
) -> tuple[Tensor, LossReport]:
    """Assemble the full objective from a single encode/sample/decode pass."""
    x = ad.as_tensor(x)
    post = model.encode(x)
    z = model.reparameterize(post, noise)
    recon = recon_loss(x, model.decode(z), model.feature_spec)
    klp = kl_prior(post)
    sup = supervised_loss(z, w, y, model)
    if beta != 0.0 and post.n >= 2:
        tc = tc_estimate(post, z, dataset_size, range(model.d))
        mmd = _free_dim_penalties(z, w, strategy, model.layout.free_dims)
    else:
        tc = Tensor(0.0)
        mmd = Tensor(0.0)
    total = ad.concat_scalars(
        [
            recon,
            ad.mul(sup, alpha),
            klp,
            ad.mul(tc, beta),
            ad.mul(mmd, beta * gamma),
        ]
    )
    report = LossReport(
        recon=recon.item(),
        kl_prior=klp.item(),
        supervised=sup.item(),
        tc=tc.item(),
        mmd_sum=mmd.item(),
        total=total.item(),
    )
    return total, report
