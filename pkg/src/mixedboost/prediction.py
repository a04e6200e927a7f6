"""Exact predictive distributions for new observations.

For the fitted model y ~ N(F(X), Psi) and prediction points with mean
F(X_p), the conditional law y_p | y is Gaussian with

    mu_p = F(X_p) + C^T Psi^{-1} (y - F(X)),
    Xi_p = Prior_p - C^T Psi^{-1} C,

where C = Cov(y, y_p) stacks the per-component cross-covariances and
Prior_p = Cov(y_p) includes contributions of effects never observed in
the training data (new groups, new GP locations).  The latent variant
drops the error variance from Prior_p.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import ndtri

from .covariance import assemble_psi
from .effects import GpComponent, GroupedComponent

_CHUNK = 512


@dataclass
class PredictiveDistribution:
    """Gaussian predictive law with dense or diagonal covariance."""

    mean: np.ndarray
    cov: np.ndarray
    diagonal: bool
    latent: bool = False

    @property
    def n(self) -> int:
        return self.mean.size

    def variances(self) -> np.ndarray:
        if self.diagonal:
            return self.cov
        return np.diag(self.cov)

    def covariance_matrix(self) -> np.ndarray:
        if self.diagonal:
            return np.diag(self.cov)
        return self.cov


def _component_inputs(component, inputs):
    """Normalize per-component prediction inputs to (main, covariate)."""
    if isinstance(inputs, tuple):
        return inputs
    return inputs, None


def _cross_and_prior(component, params_slice, inputs, diagonal, strict):
    """Cross-covariance Cov(b-part of y, y_p) and prior block of y_p."""
    main, covariate = _component_inputs(component, inputs)
    if isinstance(component, GroupedComponent):
        labels = list(main)
        n_p = len(labels)
        sigma_c = params_slice[0]
        Zp = component.prediction_incidence(labels, covariate, strict=strict)
        cross = sigma_c * (component.Z @ Zp.T)
        vals = np.ones(n_p) if covariate is None else np.asarray(covariate, float)
        if diagonal:
            prior = sigma_c * vals**2
        else:
            arr = np.array(labels, dtype=object)
            same = (arr[:, None] == arr[None, :])
            prior = sigma_c * same * np.outer(vals, vals)
        return cross, prior
    if isinstance(component, GpComponent):
        S_p = np.atleast_2d(np.asarray(main, dtype=float))
        n_p = S_p.shape[0]
        vals = np.ones(n_p) if covariate is None else np.asarray(covariate, float)
        cross_sigma = component.cross_sigma(params_slice, S_p)
        cross = component.Z @ (cross_sigma * vals[None, :])
        if diagonal:
            prior = params_slice[0] * vals**2
        else:
            prior = component.prior_sigma(params_slice, S_p) * np.outer(vals, vals)
        return cross, prior
    raise TypeError(f"unsupported component {type(component)!r}")


def predict_exact(design, params, residual, component_inputs, F_p,
                  latent=False, diagonal=False, strict_groups=False):
    """Predictive distribution of y_p (or its latent part) at new points.

    Parameters
    ----------
    design, params : fitted random-effects design and parameters.
    residual : training residual y - F(X).
    component_inputs : list aligned with design.components; per component
        the prediction-side data (group labels or locations; a
        ``(main, covariate)`` tuple for random-coefficient components).
    F_p : fixed-effects mean at the prediction points.
    latent : drop the error variance from the predictive covariance.
    diagonal : return only marginal variances (no cross terms).
    strict_groups : raise on group labels never seen in training instead
        of treating them as new, independent effects.
    """
    F_p = np.asarray(F_p, dtype=float)
    n_p = F_p.size
    residual = np.asarray(residual, dtype=float)
    if len(component_inputs) != len(design.components):
        raise ValueError("one prediction input per design component required")

    sigma2 = params.sigma2
    if not design.components:
        var = np.zeros(n_p) if latent else np.full(n_p, sigma2)
        cov = var if diagonal else np.diag(var)
        return PredictiveDistribution(F_p.copy(), cov, diagonal, latent)

    crosses = []
    prior = np.zeros(n_p) if diagonal else np.zeros((n_p, n_p))
    for comp, sl, inputs in zip(design.components, design.param_slices(),
                                component_inputs):
        cross, pr = _cross_and_prior(comp, params.values[sl], inputs,
                                     diagonal, strict_groups)
        crosses.append(sp.csr_matrix(cross) if not sp.issparse(cross) else cross)
        prior += pr
    C = crosses[0]
    for extra in crosses[1:]:
        C = C + extra
    if not latent:
        if diagonal:
            prior += sigma2
        else:
            prior[np.diag_indices(n_p)] += sigma2

    psi = assemble_psi(design, params)
    v = psi.solve(residual)
    mean = F_p + np.asarray(C.T @ v).ravel()

    if diagonal:
        var = prior.copy()
        for start in range(0, n_p, _CHUNK):
            cols = np.asarray(C[:, start:start + _CHUNK].todense())
            W = psi.solve(cols)
            var[start:start + _CHUNK] -= np.einsum("ij,ij->j", cols, W)
        np.maximum(var, 0.0, out=var)
        return PredictiveDistribution(mean, var, True, latent)

    Cd = np.asarray(C.todense())
    cov = prior - Cd.T @ psi.solve(Cd)
    cov = 0.5 * (cov + cov.T)
    return PredictiveDistribution(mean, cov, False, latent)


def predict_sum(dist: PredictiveDistribution, weights=None):
    """Mean and variance of a weighted sum over the prediction points."""
    if weights is None:
        w = np.ones(dist.n)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (dist.n,):
            raise ValueError("weight length mismatch")
    mean = float(w @ dist.mean)
    if dist.diagonal:
        var = float(w**2 @ dist.cov)
    else:
        var = float(w @ dist.cov @ w)
    return mean, var


def norm_quantile(alpha):
    """Standard normal quantile function."""
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0.0) or np.any(alpha >= 1.0):
        raise ValueError("alpha must lie strictly inside (0, 1)")
    return ndtri(alpha)


def predict_quantile(dist: PredictiveDistribution, alpha: float) -> np.ndarray:
    """Per-point alpha-quantile of the Gaussian predictive distribution."""
    z = float(norm_quantile(alpha))
    return dist.mean + z * np.sqrt(dist.variances())
