"""Student-t mixture in latent space.

The mixture is optimized through unconstrained raw parameters:
  * mixing logits m (softmax gives the weights pi),
  * dof pre-activations n with nu = ln(exp(n) + exp(2+eps)), computed in
    the equivalent overflow-safe form nu = (2+eps) + softplus(n - (2+eps)),
    which keeps every nu strictly above 2,
  * component means mu,
  * scale factors C held as a strictly-lower-triangular raw matrix plus a
    log-parameterized diagonal, with Sigma = C C^T + sigma_jitter^2 I kept
    positive definite by construction.

Closed-form posterior statistics for the Gamma-scale and cluster latents:
    alpha_k  = (nu_k + D) / 2
    beta_nk  = [nu_k + Tr(Sigma_n Sigma_k^-1)
                + (mu_n - mu_k)^T Sigma_k^-1 (mu_n - mu_k)] / 2
    ln qz_nk = ln pi_k + (nu_k/2) ln(nu_k/2) - lnG(nu_k/2)
               - ln|Sigma_k|/2 + lnG(alpha_k) - alpha_k ln beta_nk
up to a per-row constant; responsibilities are the row softmax, and
    ln rho_nk = ln qz_nk - H(Gamma(alpha_k, beta_nk)) - D ln(2 pi)/2
feeds the cross-entropy part of the lower bound.

Everything here runs on the autodiff graph so gradients reach both the
encoder outputs and the raw mixture parameters.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DomainError, NumericFault
from .tensor import Tensor, stack

log = logging.getLogger(__name__)

NU_FLOOR = 2.0
NU_FLOOR_EPS = 1e-3
BETA_UNDERFLOW_GUARD = 1e-30
LN_2PI = math.log(2.0 * math.pi)


def nu_floor_constant():
    """The additive floor in nu = floor + softplus(n - floor)."""
    return NU_FLOOR + NU_FLOOR_EPS


def raw_dof_for_nu(nu):
    """Invert the dof activation: the n giving exactly this nu (nu > floor)."""
    c = nu_floor_constant()
    if not nu > c:
        raise DomainError(f"nu must exceed {c}, got {nu!r}")
    # n = c + ln(exp(nu - c) - 1), stable for large nu
    gap = nu - c
    if gap > 30.0:
        return float(nu)  # exp(-gap) below double precision
    return c + math.log(math.expm1(gap))


class SmmRawParams:
    """Unconstrained trainable mixture parameters."""

    def __init__(self, m, n, mu, c_raw, c_logdiag, sigma_jitter_sq):
        self.m = m if isinstance(m, Tensor) else Tensor.param(m, "mix.m")
        self.n = n if isinstance(n, Tensor) else Tensor.param(n, "mix.n")
        self.mu = mu if isinstance(mu, Tensor) else Tensor.param(mu, "mix.mu")
        self.c_raw = (
            c_raw if isinstance(c_raw, Tensor) else Tensor.param(c_raw, "mix.C_raw")
        )
        self.c_logdiag = (
            c_logdiag
            if isinstance(c_logdiag, Tensor)
            else Tensor.param(c_logdiag, "mix.C_logdiag")
        )
        self.sigma_jitter_sq = float(sigma_jitter_sq)
        k = self.m.shape[0]
        d = self.mu.shape[1] if self.mu.ndim == 2 else -1
        if (
            self.n.shape != (k,)
            or self.mu.shape != (k, d)
            or self.c_raw.shape != (k, d, d)
            or self.c_logdiag.shape != (k, d)
        ):
            raise ContractViolation(
                "inconsistent raw mixture shapes: "
                f"m {self.m.shape}, n {self.n.shape}, mu {self.mu.shape}, "
                f"C_raw {self.c_raw.shape}, C_logdiag {self.c_logdiag.shape}"
            )
        if not self.sigma_jitter_sq > 0.0:
            raise ContractViolation("sigma_jitter_sq must be positive")
        self.K = k
        self.D = d

    @classmethod
    def default_init(cls, K, D, rng, sigma_jitter_sq, nu_init=5.0):
        """Spread means from a seeded rng; identity-ish scales; nu at nu_init."""
        m = np.zeros(K)
        n = np.full(K, raw_dof_for_nu(nu_init))
        mu = rng.standard_normal((K, D))
        c_raw = np.zeros((K, D, D))
        c_logdiag = np.zeros((K, D))
        return cls(m, n, mu, c_raw, c_logdiag, sigma_jitter_sq)

    def params(self):
        return {
            t.name: t
            for t in (self.m, self.n, self.mu, self.c_raw, self.c_logdiag)
        }


@dataclass
class SmmParams:
    """Materialized (constrained) mixture parameters, on the graph."""

    pi: Tensor  # (K,)
    nu: Tensor  # (K,) each > 2
    mu: Tensor  # (K, D)
    sigma: list  # K Tensors (D, D), SPD
    sigma_inv: list  # K Tensors (D, D)
    log_det_sigma: Tensor  # (K,)
    sigma_chol: np.ndarray  # (K, D, D) numeric Cholesky factors, for sampling

    @property
    def K(self):
        return self.pi.shape[0]

    @property
    def D(self):
        return self.mu.shape[1]


@dataclass
class PosteriorStats:
    """Closed-form posterior pieces for one batch."""

    alpha: Tensor  # (K,)
    beta: Tensor  # (N, K)
    log_qz: Tensor  # (N, K), unnormalized per row
    gamma: Tensor  # (N, K), rows sum to 1
    log_rho: Tensor  # (N, K)


def materialize_params(raw):
    """Constrain raw parameters: simplex pi, nu > 2, SPD Sigma with fresh
    Cholesky factors. Differentiable end-to-end."""
    k_comp, d = raw.K, raw.D
    pi = raw.m.softmax()
    c = nu_floor_constant()
    nu = (raw.n - c).softplus() + c
    strict_mask = Tensor(np.tril(np.ones((d, d)), k=-1))
    eye = Tensor(np.eye(d) * raw.sigma_jitter_sq)
    sigma, sigma_inv, log_dets = [], [], []
    chols = np.empty((k_comp, d, d))
    for k in range(k_comp):
        c_k = raw.c_raw.take(k) * strict_mask + raw.c_logdiag.take(k).exp().diag_embed()
        sig = c_k @ c_k.T + eye
        sigma.append(sig)
        sigma_inv.append(sig.inverse())
        log_dets.append(sig.logdet())
        try:
            chols[k] = np.linalg.cholesky(sig.data)
        except np.linalg.LinAlgError as exc:  # cannot happen for jitter > 0
            raise NumericFault(
                f"scale matrix {k} lost positive definiteness: {exc}"
            ) from exc
    params = SmmParams(
        pi=pi,
        nu=nu,
        mu=raw.mu,
        sigma=sigma,
        sigma_inv=sigma_inv,
        log_det_sigma=stack(log_dets),
        sigma_chol=chols,
    )
    if abs(float(params.pi.data.sum()) - 1.0) > 1e-9:
        raise NumericFault("mixing weights drifted off the simplex")
    if not (params.nu.data > NU_FLOOR).all():
        raise NumericFault("a dof slipped below its floor")
    return params


def compute_alpha(params, d_latent):
    """alpha_k = (nu_k + D) / 2."""
    if d_latent < 1:
        raise ContractViolation(f"latent dimension must be >= 1, got {d_latent}")
    return (params.nu + float(d_latent)) * 0.5


def compute_beta(enc, params):
    """beta_nk = [nu_k + trace + Mahalanobis] / 2, shape (N, K)."""
    var = (enc.log_std_x * 2.0).exp()  # (N, D) encoder variances
    cols = []
    for k in range(params.K):
        inv_k = params.sigma_inv[k]
        trace = (var * inv_k.diag_part()).sum(axis=1)
        diff = enc.mu_x - params.mu.take(k).reshape(1, params.D)
        quad = ((diff @ inv_k) * diff).sum(axis=1)
        cols.append((params.nu.take(k) + trace + quad) * 0.5)
    return stack(cols, axis=1)


def _log_beta(beta):
    """ln beta with an underflow guard; a clamp hit is logged, not fatal."""
    if (beta.data < BETA_UNDERFLOW_GUARD).any():
        n_idx, k_idx = np.unravel_index(np.argmin(beta.data), beta.data.shape)
        log.warning(
            "beta underflow clamped at (n=%d, k=%d): %.3e",
            n_idx,
            k_idx,
            float(beta.data[n_idx, k_idx]),
        )
    return beta.clip_min(BETA_UNDERFLOW_GUARD).log()


def compute_log_qz(enc, params, alpha, beta):
    """Unnormalized log posterior class scores, shape (N, K)."""
    half_nu = params.nu * 0.5
    const_k = (
        params.pi.log()
        + half_nu * half_nu.log()
        - half_nu.lgamma()
        - params.log_det_sigma * 0.5
        + alpha.lgamma()
    )  # (K,)
    out = const_k.reshape(1, params.K) - alpha.reshape(1, params.K) * _log_beta(beta)
    if not np.isfinite(out.data).all():
        n_idx, k_idx = np.argwhere(~np.isfinite(out.data))[0]
        raise NumericFault(f"log_qz non-finite at (n={n_idx}, k={k_idx})")
    return out


def responsibilities(log_qz):
    """Row-wise softmax of the class scores."""
    return log_qz.softmax(axis=-1)


def compute_log_rho(log_qz, alpha, beta, d_latent):
    """ln rho_nk = ln qz_nk - H(Gamma(alpha_k, beta_nk)) - D ln(2 pi) / 2."""
    if d_latent < 1:
        raise ContractViolation(f"latent dimension must be >= 1, got {d_latent}")
    k_count = alpha.shape[0]
    # gamma entropy: alpha - ln beta + lnG(alpha) + (1 - alpha) psi(alpha)
    ent_k = (alpha + alpha.lgamma() + (1.0 - alpha) * alpha.digamma()).reshape(
        1, k_count
    )
    entropy = ent_k - _log_beta(beta)
    return log_qz - entropy - 0.5 * d_latent * LN_2PI


def posterior_stats(enc, params):
    """All posterior pieces for a batch of encoder outputs."""
    d_latent = params.D
    alpha = compute_alpha(params, d_latent)
    beta = compute_beta(enc, params)
    log_qz = compute_log_qz(enc, params, alpha, beta)
    gamma = responsibilities(log_qz)
    log_rho = compute_log_rho(log_qz, alpha, beta, d_latent)
    return PosteriorStats(
        alpha=alpha, beta=beta, log_qz=log_qz, gamma=gamma, log_rho=log_rho
    )


# ------------------------------------------------------------- generative side


def sample_generative(rng, params, count):
    """Ancestral sampling: z ~ Cat(pi), u ~ Gamma(nu/2, nu/2), x ~ N(mu, Sigma/u).

    Returns (labels, u, x) as ndarrays of shapes (count,), (count,), (count, D).
    """
    from .distributions import sample_categorical_array, sample_gamma_array
    from .distributions import standard_normal_array

    d = params.D
    labels = sample_categorical_array(rng, params.pi.data, count)
    u = np.empty(count)
    x = np.empty((count, d))
    for k in range(params.K):
        idx = np.nonzero(labels == k)[0]
        if idx.size == 0:
            continue
        half_nu = float(params.nu.data[k]) / 2.0
        u_k = sample_gamma_array(rng, half_nu, half_nu, idx.size)
        z = standard_normal_array(rng, idx.size * d).reshape(idx.size, d)
        scaled = (z / np.sqrt(u_k)[:, None]) @ params.sigma_chol[k].T
        x[idx] = params.mu.data[k] + scaled
        u[idx] = u_k
    return labels, u, x


# ----------------------------------------------------------- GMM warm start


@dataclass
class GmmFit:
    """EM result used to warm-start training."""

    raw: SmmRawParams
    responsibilities: np.ndarray  # (N, K)
    log_likelihoods: list  # per-iteration total data log-likelihood


def _gaussian_mix_log_pdfs(data, means, chols):
    """(N, K) matrix of component log-densities via Cholesky solves."""
    n, d = data.shape
    k_count = means.shape[0]
    out = np.empty((n, k_count))
    for k in range(k_count):
        chol = chols[k]
        y = np.linalg.solve(chol, (data - means[k]).T)  # lower-triangular
        maha = (y * y).sum(axis=0)
        out[:, k] = -0.5 * (d * LN_2PI + maha) - np.log(np.diag(chol)).sum()
    return out


def _logsumexp_rows(a):
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True))).ravel()


def _kmeanspp_centers(data, k_count, rng):
    n = data.shape[0]
    centers = [data[int(rng.integers(n))]]
    for _ in range(1, k_count):
        d2 = np.min(
            [((data - c) ** 2).sum(axis=1) for c in centers], axis=0
        )
        total = d2.sum()
        if total <= 0.0:
            centers.append(data[int(rng.integers(n))])
            continue
        r = rng.random() * total
        centers.append(data[int(np.searchsorted(np.cumsum(d2), r))])
    return np.array(centers)


def _floor_spd(mat, floor):
    """Project a symmetric matrix onto {Sigma : Sigma >= floor*I}.

    Eigenvalue clipping in the matrix's own eigenbasis is the exact
    maximizer of the Gaussian M-step objective under that constraint, so
    EM stays monotone even when the floor is active.
    """
    sym = (mat + mat.T) / 2.0
    eigval, eigvec = np.linalg.eigh(sym)
    return (eigvec * np.maximum(eigval, floor)) @ eigvec.T


def gmm_em_fit(data, k_count, rng, sigma_jitter_sq, iters=50, tol=1e-6, nu_init=5.0):
    """Fit a Gaussian mixture by EM and package it as warm-start parameters.

    k-means++ seeding; covariance eigenvalues are floored at the jitter
    level so every factorization stays well-posed; a component that loses
    all its weight is re-seeded at a random data point. Stops when the
    total log-likelihood gain drops below ``tol`` or after ``iters`` rounds.
    """
    data = np.asarray(data, dtype=np.float64)
    n, d = data.shape
    if n < k_count:
        raise ContractViolation(f"need at least K={k_count} rows, got {n}")
    means = _kmeanspp_centers(data, k_count, rng)
    global_cov = _floor_spd(np.cov(data.T, bias=True).reshape(d, d), sigma_jitter_sq)
    covs = np.stack([global_cov] * k_count)
    weights = np.full(k_count, 1.0 / k_count)
    resp = np.full((n, k_count), 1.0 / k_count)
    lls = []
    for _ in range(iters):
        chols = np.linalg.cholesky(covs)
        scores = _gaussian_mix_log_pdfs(data, means, chols) + np.log(weights)
        row_ll = _logsumexp_rows(scores)
        lls.append(float(row_ll.sum()))
        resp = np.exp(scores - row_ll[:, None])
        if len(lls) > 1 and lls[-1] - lls[-2] < tol:
            break
        counts = resp.sum(axis=0)
        for k in range(k_count):
            if counts[k] < 1e-8:  # dead component: re-seed and keep going
                means[k] = data[int(rng.integers(n))]
                covs[k] = global_cov
                counts[k] = 1.0
                resp[:, k] = 1.0 / n
                continue
            means[k] = resp[:, k] @ data / counts[k]
            diff = data - means[k]
            covs[k] = _floor_spd(
                (resp[:, k] * diff.T) @ diff / counts[k], sigma_jitter_sq
            )
        weights = counts / counts.sum()

    raw = raw_from_moments(weights, means, covs, sigma_jitter_sq, nu_init)
    return GmmFit(raw=raw, responsibilities=resp, log_likelihoods=lls)


def raw_from_moments(weights, means, covs, sigma_jitter_sq, nu_init=5.0):
    """Package mixture moments as raw parameters.

    Per component, C_k C_k^T reproduces cov_k - jitter*I (eigenvalues
    floored so the factorization stays well-posed); weights enter through
    their logits and every dof starts at ``nu_init``.
    """
    weights = np.asarray(weights, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    covs = np.asarray(covs, dtype=np.float64)
    k_count, d = means.shape
    c_raw = np.zeros((k_count, d, d))
    c_logdiag = np.zeros((k_count, d))
    for k in range(k_count):
        bare = covs[k] - sigma_jitter_sq * np.eye(d)
        eigval, eigvec = np.linalg.eigh((bare + bare.T) / 2.0)
        eigval = np.maximum(eigval, 1e-8)
        chol = np.linalg.cholesky(
            (eigvec * eigval) @ eigvec.T + 1e-12 * np.eye(d)
        )
        c_raw[k] = np.tril(chol, k=-1)
        c_logdiag[k] = np.log(np.diag(chol))
    return SmmRawParams(
        m=np.log(np.maximum(weights, 1e-12)),
        n=np.full(k_count, raw_dof_for_nu(nu_init)),
        mu=means.copy(),
        c_raw=c_raw,
        c_logdiag=c_logdiag,
        sigma_jitter_sq=sigma_jitter_sq,
    )
