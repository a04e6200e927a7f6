"""Random effects designs: grouped effects, Gaussian processes, and kernels.

A :class:`RandomEffectsDesign` describes the latent structure of the model

    y = F(X) + Z b + e,    b ~ N(0, Sigma),    e ~ N(0, sigma2 * I),

as a list of components.  Each component contributes a block of columns to
the incidence matrix ``Z`` and a block of ``Sigma``.  Two component types
are supported:

- :class:`GroupedComponent`: one i.i.d. random effect per group (random
  intercepts), or random slopes when a covariate is attached.
- :class:`GpComponent`: a finite-dimensional Gaussian process observed at
  (possibly duplicated) locations, with an exponential or Gaussian kernel.

The covariance parameter vector is laid out as ``[error variance, then per
component: marginal variance (and range, for GP components)]``.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

EXPONENTIAL = "exponential"
GAUSSIAN = "gaussian"

_KERNEL_KINDS = (EXPONENTIAL, GAUSSIAN)


class NonPositiveDefiniteError(ValueError):
    """Raised when a covariance matrix cannot be factorized.

    Carries the offending parameter values in ``params`` when available.
    """

    def __init__(self, message, params=None):
        super().__init__(message)
        self.params = params


@dataclass(frozen=True)
class CovarianceParameters:
    """Vector of variance and covariance parameters.

    ``values[0]`` is always the error variance; the remaining entries are
    the per-component marginal variances and (for GP components) range
    parameters, in design order.  All entries must be strictly positive.
    """

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 1 or vals.size < 1:
            raise ValueError("parameter vector must be 1-D and non-empty")
        if not np.all(np.isfinite(vals)):
            raise ValueError("parameters must be finite")
        if np.any(vals <= 0.0):
            raise ValueError(f"parameters must be strictly positive, got {vals}")
        object.__setattr__(self, "values", vals)

    @property
    def sigma2(self) -> float:
        """Error variance (first element)."""
        return float(self.values[0])

    @property
    def q(self) -> int:
        return self.values.size

    def to_log(self) -> np.ndarray:
        return np.log(self.values)

    @classmethod
    def from_log(cls, log_values) -> "CovarianceParameters":
        return cls(np.exp(np.asarray(log_values, dtype=float)))

    def replace(self, values) -> "CovarianceParameters":
        return CovarianceParameters(np.asarray(values, dtype=float))


def build_incidence(labels, covariate=None):
    """Build the sparse incidence matrix of a grouping variable.

    Parameters
    ----------
    labels : sequence of length n
        Group label per observation (any hashable values).
    covariate : array_like of shape (n,), optional
        Random-coefficient covariate.  When given, the single nonzero in
        row i is ``covariate[i]`` instead of 1.

    Returns
    -------
    Z : scipy.sparse.csr_matrix of shape (n, m)
        One nonzero per row.  Columns are ordered by first appearance of
        their group label in ``labels``.
    unique_labels : list
        The group label of each column.
    """
    labels = list(labels)
    n = len(labels)
    if n == 0:
        raise ValueError("labels must be non-empty")
    col_of = {}
    cols = np.empty(n, dtype=np.int64)
    for i, lab in enumerate(labels):
        if lab not in col_of:
            col_of[lab] = len(col_of)
        cols[i] = col_of[lab]
    m = len(col_of)
    if covariate is None:
        data = np.ones(n)
    else:
        data = np.asarray(covariate, dtype=float)
        if data.shape != (n,):
            raise ValueError(f"covariate length {data.shape} does not match {n} labels")
        if not np.all(np.isfinite(data)):
            raise ValueError("covariate must be finite")
    Z = sp.csr_matrix((data, (np.arange(n), cols)), shape=(n, m))
    return Z, list(col_of)


def _unique_rows_first_appearance(S):
    """Unique rows of S in order of first appearance, plus inverse index."""
    seen = {}
    inverse = np.empty(S.shape[0], dtype=np.int64)
    rows = []
    for i in range(S.shape[0]):
        key = S[i].tobytes()
        j = seen.get(key)
        if j is None:
            j = len(rows)
            seen[key] = j
            rows.append(S[i])
        inverse[i] = j
    return np.array(rows), inverse


def kernel_correlation(kind, dists, rho):
    """Isotropic autocorrelation r(d / rho) for the supported kernels."""
    h = np.asarray(dists, dtype=float) / rho
    if kind == EXPONENTIAL:
        return np.exp(-h)
    if kind == GAUSSIAN:
        return np.exp(-(h**2))
    raise ValueError(f"unknown kernel kind {kind!r}")


def kernel_covariance(S1, kind, sigma1_sq, rho, S2=None):
    """Dense covariance matrix of an isotropic kernel between location sets.

    Entries are ``sigma1_sq * r(||s - s'|| / rho)``; the diagonal of the
    symmetric case equals ``sigma1_sq`` exactly.
    """
    if sigma1_sq <= 0 or rho <= 0:
        raise ValueError("sigma1_sq and rho must be positive")
    S1 = np.atleast_2d(np.asarray(S1, dtype=float))
    if not np.all(np.isfinite(S1)):
        raise ValueError("locations must be finite")
    if S2 is None:
        S2 = S1
    else:
        S2 = np.atleast_2d(np.asarray(S2, dtype=float))
        if not np.all(np.isfinite(S2)):
            raise ValueError("locations must be finite")
    d = _pairwise_distances(S1, S2)
    return sigma1_sq * kernel_correlation(kind, d, rho)


def kernel_covariance_drho(S1, kind, sigma1_sq, rho, S2=None):
    """Entrywise derivative of :func:`kernel_covariance` w.r.t. the range."""
    S1 = np.atleast_2d(np.asarray(S1, dtype=float))
    S2 = S1 if S2 is None else np.atleast_2d(np.asarray(S2, dtype=float))
    d = _pairwise_distances(S1, S2)
    if kind == EXPONENTIAL:
        return sigma1_sq * np.exp(-d / rho) * d / rho**2
    if kind == GAUSSIAN:
        return sigma1_sq * np.exp(-((d / rho) ** 2)) * 2.0 * d**2 / rho**3
    raise ValueError(f"unknown kernel kind {kind!r}")


def _pairwise_distances(S1, S2):
    # cdist without the scipy.spatial import cost on hot paths; exact
    # zeros on identical rows matter for the r(0) = 1 diagonal.
    diff = S1[:, None, :] - S2[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    np.maximum(d2, 0.0, out=d2)
    return np.sqrt(d2)


@dataclass
class GroupedComponent:
    """Grouped (clustered) random effects, optionally with random slopes.

    ``Sigma`` for this component is ``sigma_c^2 * I_m`` with one effect per
    distinct label, so the only parameter is the marginal variance.
    """

    labels: list
    covariate: np.ndarray | None = None
    Z: sp.csr_matrix = field(init=False, repr=False)
    column_labels: list = field(init=False, repr=False)

    def __post_init__(self):
        self.Z, self.column_labels = build_incidence(self.labels, self.covariate)

    @property
    def n_params(self) -> int:
        return 1

    @property
    def m(self) -> int:
        return self.Z.shape[1]

    @property
    def is_grouped(self) -> bool:
        return True

    def param_names(self, idx):
        return [f"var_group{idx}"]

    def sigma_diag(self, params_slice):
        return np.full(self.m, params_slice[0])

    def sigma(self, params_slice):
        return params_slice[0] * np.eye(self.m)

    def dsigma(self, params_slice, local_k):
        if local_k != 0:
            raise IndexError(local_k)
        return np.eye(self.m)

    def subset(self, indices):
        labels = [self.labels[i] for i in indices]
        cov = None if self.covariate is None else np.asarray(self.covariate)[indices]
        return GroupedComponent(labels, cov)

    def prediction_incidence(self, new_labels, new_covariate=None, strict=False):
        """Incidence of prediction rows onto *observed* effect columns.

        Unseen labels get an all-zero row (treated as new, independent
        effects) unless ``strict`` is set.
        """
        new_labels = list(new_labels)
        n_p = len(new_labels)
        col_of = {lab: j for j, lab in enumerate(self.column_labels)}
        rows, cols, data = [], [], []
        if new_covariate is None:
            vals = np.ones(n_p)
        else:
            vals = np.asarray(new_covariate, dtype=float)
        for i, lab in enumerate(new_labels):
            j = col_of.get(lab)
            if j is None:
                if strict:
                    raise KeyError(f"unknown group label {lab!r}")
                continue
            rows.append(i)
            cols.append(j)
            data.append(vals[i])
        return sp.csr_matrix((data, (rows, cols)), shape=(n_p, self.m))


@dataclass
class GpComponent:
    """Finite-dimensional Gaussian process at observed locations.

    Duplicated locations share one latent effect: the component stores the
    unique locations (first-appearance order, exact coordinate equality)
    and an incidence matrix onto them.  Parameters are the marginal
    variance and the range.
    """

    locations: np.ndarray
    kernel: str = EXPONENTIAL
    covariate: np.ndarray | None = None
    Z: sp.csr_matrix = field(init=False, repr=False)
    unique_locations: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.locations, dtype=float))
        if S.shape[0] == 0:
            raise ValueError("locations must be non-empty")
        if not np.all(np.isfinite(S)):
            raise ValueError("locations must be finite")
        if self.kernel not in _KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kernel!r}")
        self.locations = S
        self.unique_locations, inverse = _unique_rows_first_appearance(S)
        n = S.shape[0]
        if self.covariate is None:
            data = np.ones(n)
        else:
            data = np.asarray(self.covariate, dtype=float)
            if data.shape != (n,):
                raise ValueError("covariate length mismatch")
        self.Z = sp.csr_matrix(
            (data, (np.arange(n), inverse)), shape=(n, self.unique_locations.shape[0])
        )

    @property
    def n_params(self) -> int:
        return 2

    @property
    def m(self) -> int:
        return self.unique_locations.shape[0]

    @property
    def is_grouped(self) -> bool:
        return False

    def param_names(self, idx):
        return [f"var_gp{idx}", f"range_gp{idx}"]

    def sigma(self, params_slice):
        sigma1_sq, rho = params_slice
        return kernel_covariance(self.unique_locations, self.kernel, sigma1_sq, rho)

    def dsigma(self, params_slice, local_k):
        sigma1_sq, rho = params_slice
        if local_k == 0:
            return self.sigma(params_slice) / sigma1_sq
        if local_k == 1:
            return kernel_covariance_drho(
                self.unique_locations, self.kernel, sigma1_sq, rho
            )
        raise IndexError(local_k)

    def subset(self, indices):
        cov = None if self.covariate is None else np.asarray(self.covariate)[indices]
        return GpComponent(self.locations[indices], self.kernel, cov)

    def cross_sigma(self, params_slice, new_locations):
        """Covariance between observed unique effects and new locations."""
        sigma1_sq, rho = params_slice
        return kernel_covariance(
            self.unique_locations, self.kernel, sigma1_sq, rho,
            S2=np.atleast_2d(np.asarray(new_locations, dtype=float)),
        )

    def prior_sigma(self, params_slice, new_locations):
        sigma1_sq, rho = params_slice
        return kernel_covariance(new_locations, self.kernel, sigma1_sq, rho)


class RandomEffectsDesign:
    """Random-effects structure of a data set: components, Z, and Sigma.

    Parameters
    ----------
    components : list of GroupedComponent | GpComponent
        May be empty, in which case the model has only the error term and
        a single parameter (the error variance).
    """

    def __init__(self, components, n=None):
        self.components = list(components)
        ns = {c.Z.shape[0] for c in self.components}
        if len(ns) > 1:
            raise ValueError(f"components disagree on sample size: {sorted(ns)}")
        if ns:
            cn = ns.pop()
            if n is not None and n != cn:
                raise ValueError(f"n={n} disagrees with component rows {cn}")
            self._n = cn
        else:
            self._n = n

    @property
    def n(self):
        return self._n

    @property
    def m(self) -> int:
        return sum(c.m for c in self.components)

    @property
    def q(self) -> int:
        """Number of covariance parameters, error variance included."""
        return 1 + sum(c.n_params for c in self.components)

    @property
    def all_grouped(self) -> bool:
        return all(c.is_grouped for c in self.components)

    def param_names(self):
        names = ["var_error"]
        for idx, c in enumerate(self.components):
            names.extend(c.param_names(idx))
        return names

    def variance_mask(self) -> np.ndarray:
        """Boolean mask over theta: True for variances, False for ranges."""
        mask = [True]
        for c in self.components:
            mask.extend([True] if c.is_grouped else [True, False])
        return np.asarray(mask)

    def param_slices(self):
        """Slice of the parameter vector owned by each component."""
        out = []
        start = 1
        for c in self.components:
            out.append(slice(start, start + c.n_params))
            start += c.n_params
        return out

    def column_slices(self):
        """Slice of the random-effect columns owned by each component."""
        out = []
        start = 0
        for c in self.components:
            out.append(slice(start, start + c.m))
            start += c.m
        return out

    def validate_params(self, params: CovarianceParameters):
        if params.q != self.q:
            raise ValueError(
                f"design expects {self.q} parameters, got {params.q}"
            )

    def incidence(self) -> sp.csr_matrix:
        if not self.components:
            raise ValueError("design has no random effects")
        return sp.hstack([c.Z for c in self.components], format="csr")

    def sigma(self, params: CovarianceParameters) -> np.ndarray:
        """Block-diagonal covariance of the stacked random effects."""
        self.validate_params(params)
        blocks = [
            c.sigma(params.values[s])
            for c, s in zip(self.components, self.param_slices())
        ]
        return _block_diag(blocks)

    def sigma_diag_values(self, params: CovarianceParameters) -> np.ndarray:
        """Diagonal of Sigma when every component is grouped."""
        assert self.all_grouped
        return np.concatenate(
            [c.sigma_diag(params.values[s])
             for c, s in zip(self.components, self.param_slices())]
        )

    def dsigma(self, params: CovarianceParameters, k: int) -> np.ndarray:
        """d Sigma / d theta_k as a dense m x m matrix (k >= 1)."""
        comp, local_k, _ = self.locate_param(k)
        blocks = []
        for c, s in zip(self.components, self.param_slices()):
            if c is comp:
                blocks.append(c.dsigma(params.values[s], local_k))
            else:
                blocks.append(np.zeros((c.m, c.m)))
        return _block_diag(blocks)

    def locate_param(self, k: int):
        """Map a global parameter index to (component, local index, comp index)."""
        if k < 1 or k >= self.q:
            raise IndexError(f"parameter index {k} out of range [1, {self.q})")
        start = 1
        for ci, c in enumerate(self.components):
            if k < start + c.n_params:
                return c, k - start, ci
            start += c.n_params
        raise IndexError(k)  # unreachable

    def subset(self, indices) -> "RandomEffectsDesign":
        indices = np.asarray(indices)
        n = indices.size if not self.components else None
        return RandomEffectsDesign([c.subset(indices) for c in self.components], n=n)


def _block_diag(blocks):
    blocks = [b for b in blocks]
    if not blocks:
        return np.zeros((0, 0))
    m = sum(b.shape[0] for b in blocks)
    out = np.zeros((m, m))
    start = 0
    for b in blocks:
        k = b.shape[0]
        out[start:start + k, start:start + k] = b
        start += k
    return out


def grouped_design(labels, covariate=None) -> RandomEffectsDesign:
    """Single-level grouped random effects design."""
    return RandomEffectsDesign([GroupedComponent(list(labels), covariate)])


def gp_design(locations, kernel=EXPONENTIAL) -> RandomEffectsDesign:
    """Single Gaussian process design."""
    return RandomEffectsDesign([GpComponent(np.asarray(locations, dtype=float), kernel)])


def empty_design(n) -> RandomEffectsDesign:
    """Design with no random effects: y = F(X) + e, theta = (sigma2,)."""
    return RandomEffectsDesign([], n=int(n))
