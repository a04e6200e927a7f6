"""Marginal covariance operator Psi = Z Sigma Z^T + sigma2 I and derivatives.

:func:`assemble_psi` picks one of two equivalent computational paths:

- a dense Cholesky factorization of Psi, used whenever a GP component is
  present or the random-effect dimension is not smaller than n;
- a low-rank (Sherman-Morrison-Woodbury) path for purely grouped designs
  with m < n, which factors the m x m matrix ``sigma2 * Sigma^{-1} + Z^T Z``
  instead.  For a single-level grouping that matrix is diagonal and all
  operations are O(n).

Both paths expose the same interface (solve, log-determinant, quadratic
form, derivative traces) and agree to high relative accuracy.
"""

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .effects import CovarianceParameters, NonPositiveDefiniteError, RandomEffectsDesign

_JITTER_REL = 1e-10


def assemble_psi(design: RandomEffectsDesign, params: CovarianceParameters):
    """Build a solve/log-det operator for Psi at the given parameters."""
    design.validate_params(params)
    n = design.n
    if not design.components:
        return _NoEffectsPsi(design, params)
    if design.all_grouped and design.m < n:
        return _WoodburyPsi(design, params)
    return _DensePsi(design, params)


def psi_matrix(design, params, n=None):
    """Dense Psi, mainly for oracles and small-n paths."""
    if not design.components:
        if n is None:
            raise ValueError("n required for a design without random effects")
        return params.sigma2 * np.eye(n)
    Z = design.incidence()
    sigma = design.sigma(params)
    psi = (Z @ (Z @ sigma).T).T  # Z Sigma Z^T with sparse Z
    psi = np.asarray(psi)
    psi[np.diag_indices_from(psi)] += params.sigma2
    return psi


def psi_derivative(design, params, k, n=None):
    """Dense d Psi / d theta_k.

    k = 0 is the error variance (identity); other indices differentiate
    the component covariance blocks.
    """
    if n is None:
        n = design.n
    if k == 0:
        return np.eye(n)
    dsigma = design.dsigma(params, k)
    Z = design.incidence()
    return np.asarray((Z @ (Z @ dsigma).T).T)


def _chol_with_jitter(mat, params, jitter_scale):
    """Cholesky with one jitter retry; raises NonPositiveDefiniteError."""
    try:
        return sla.cho_factor(mat, lower=True)
    except sla.LinAlgError:
        pass
    bumped = mat.copy()
    bumped[np.diag_indices_from(bumped)] += _JITTER_REL * jitter_scale
    try:
        return sla.cho_factor(bumped, lower=True)
    except sla.LinAlgError as exc:
        raise NonPositiveDefiniteError(
            f"covariance matrix is not positive definite at parameters "
            f"{params.values}", params=params.values,
        ) from exc


class _PsiBase:
    """Shared helpers; subclasses implement solve/log_det/traces."""

    def __init__(self, design, params):
        self.design = design
        self.params = params
        self.n = design.n

    def quad_form(self, r):
        """r^T Psi^{-1} r."""
        r = np.asarray(r, dtype=float)
        return float(r @ self.solve(r))

    def solve_dagger(self, rhs):
        """Apply (Psi / sigma2)^{-1}."""
        return self.params.sigma2 * self.solve(rhs)

    def matrix(self):
        return psi_matrix(self.design, self.params, n=self.n)

    def inverse(self):
        return self.solve(np.eye(self.n))

    def dpsi_quad(self, v, k):
        """v^T (d Psi / d theta_k) v without forming the derivative."""
        v = np.asarray(v, dtype=float)
        if k == 0:
            return float(v @ v)
        comp, local_k, ci = self.design.locate_param(k)
        if comp.is_grouped:
            ztv = comp.Z.T @ v
            return float(ztv @ ztv)
        sl = self.design.param_slices()[ci]
        dsig = comp.dsigma(self.params.values[sl], local_k)
        ztv = comp.Z.T @ v
        return float(ztv @ dsig @ ztv)


class _NoEffectsPsi(_PsiBase):
    """Psi = sigma2 * I for a design without random effects."""

    path = "identity"

    def __init__(self, design, params):
        super().__init__(design, params)
        if self.n is None:
            raise ValueError("sample size unknown; design has no components")

    def solve(self, rhs):
        return np.asarray(rhs, dtype=float) / self.params.sigma2

    def log_det(self):
        return self.n * np.log(self.params.sigma2)

    def trace_solve_dpsi(self, k):
        assert k == 0
        return self.n / self.params.sigma2


class _DensePsi(_PsiBase):
    """Dense Cholesky path."""

    path = "dense"

    def __init__(self, design, params):
        super().__init__(design, params)
        if self.n is None:
            self.n = design.components[0].Z.shape[0]
        psi = psi_matrix(design, params, n=self.n)
        # jitter scale: largest component variance
        var_scale = max(
            params.values[s][0] for s in design.param_slices()
        )
        self._cf = _chol_with_jitter(psi, params, var_scale)
        self._psi = psi
        self._inv = None

    def solve(self, rhs):
        return sla.cho_solve(self._cf, np.asarray(rhs, dtype=float))

    def log_det(self):
        return 2.0 * float(np.sum(np.log(np.diag(self._cf[0]))))

    def inverse(self):
        if self._inv is None:
            self._inv = sla.cho_solve(self._cf, np.eye(self.n))
        return self._inv

    def trace_solve_dpsi(self, k):
        """tr(Psi^{-1} dPsi_k) via the entrywise sum of the product."""
        inv = self.inverse()
        if k == 0:
            return float(np.trace(inv))
        dpsi = psi_derivative(self.design, self.params, k, n=self.n)
        return float(np.sum(inv * dpsi))


class _WoodburyPsi(_PsiBase):
    """Low-rank path for grouped designs: factor sigma2*Sigma^{-1} + Z^T Z."""

    path = "woodbury"

    def __init__(self, design, params):
        super().__init__(design, params)
        self.Z = design.incidence()
        self.G = (self.Z.T @ self.Z).tocsc()
        sigma2 = params.sigma2
        self._sigma_diag = design.sigma_diag_values(params)
        inner = self.G + sp.diags(sigma2 / self._sigma_diag)
        inner = inner.tocsc()
        m = inner.shape[0]
        offdiag = inner - sp.diags(inner.diagonal())
        if offdiag.count_nonzero() == 0:
            self._inner_diag = inner.diagonal()
            if np.any(self._inner_diag <= 0):
                raise NonPositiveDefiniteError(
                    f"non-PD grouped covariance at parameters {params.values}",
                    params=params.values,
                )
            self._inner_cf = None
        else:
            self._inner_diag = None
            self._inner_cf = _chol_with_jitter(
                inner.toarray(), params, float(np.max(self._sigma_diag))
            )
        self.m = m
        self._G_dense = None
        self._W_G = None

    def _inner_solve(self, rhs):
        if self._inner_diag is not None:
            if rhs.ndim == 1:
                return rhs / self._inner_diag
            return rhs / self._inner_diag[:, None]
        return sla.cho_solve(self._inner_cf, rhs)

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        zt = self.Z.T @ rhs
        return (rhs - self.Z @ self._inner_solve(zt)) / self.params.sigma2

    def log_det(self):
        # det(Psi) = det(sigma2*Sigma^{-1} + Z^T Z) * det(Sigma) * sigma2^(n-m)
        sigma2 = self.params.sigma2
        if self._inner_diag is not None:
            ld_inner = float(np.sum(np.log(self._inner_diag)))
        else:
            ld_inner = 2.0 * float(np.sum(np.log(np.diag(self._inner_cf[0]))))
        ld_sigma = float(np.sum(np.log(self._sigma_diag)))
        return ld_inner + ld_sigma + (self.n - self.m) * np.log(sigma2)

    def _dense_G_and_WG(self):
        if self._W_G is None:
            self._G_dense = self.G.toarray()
            self._W_G = self._inner_solve(self._G_dense)
        return self._G_dense, self._W_G

    def trace_solve_dpsi(self, k):
        sigma2 = self.params.sigma2
        G, W_G = self._dense_G_and_WG()
        if k == 0:
            # tr(Psi^{-1}) = (n - tr(W G)) / sigma2
            return (self.n - float(np.trace(W_G))) / sigma2
        comp, local_k, ci = self.design.locate_param(k)
        cols = self.design.column_slices()[ci]
        # tr(Psi^{-1} Z E_c Z^T) = (tr(E_c G) - tr(W G E_c G)) / sigma2
        tr_ecg = float(np.trace(G[cols, cols]))
        tr_wgeg = float(np.sum(G[:, cols] * W_G[:, cols]))
        return (tr_ecg - tr_wgeg) / sigma2
