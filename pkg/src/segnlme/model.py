"""Segmented nonlinear mixed-effects model: types, mean functions, likelihoods.

The mean trajectory of subject ``i`` at time ``t`` is

    g((t - tau_i)^-, a_i) + h((t - tau_i)^+, b_i)

with a linear pre-change segment ``g(s, a) = a * s`` and one of two
post-change segments:

* ``"biexp"``:   ``h(s, b) = log10(b1 exp(-b2 s) + b3 exp(-b4 s))``
* ``"onecomp"``: ``h(s, b) = log10(b1 + b2 exp(-b3 s))``

Random effects are stored on a Gaussian latent scale.  Latents tagged
``"exp"`` are log-normal on the natural scale; the exponential is applied
only inside the mean function, so every prior stays Gaussian and the M-step
closed forms are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import log_ndtr

from .errors import DomainError, ParameterError, StateError

LN10 = math.log(10.0)
LOG_2PI = math.log(2.0 * math.pi)

_POST_DIMS = {"biexp": 4, "onecomp": 3}
_TRANSFORMS = ("identity", "exp")


# ---------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class ObservationRecord:
    """One viral-load report.

    ``value`` is in log10 copies/mL; for a censored record it holds the
    detection limit as a placeholder.
    """

    time: float
    value: float
    censored: bool
    detection_limit: float

    def __post_init__(self):
        if not (self.time >= 0.0):
            raise ParameterError(f"record time must be >= 0, got {self.time}")
        if not math.isfinite(self.detection_limit):
            raise ParameterError("detection limit must be finite")
        if self.censored and self.value != self.detection_limit:
            raise ParameterError(
                "censored record must carry its detection limit as value"
            )


@dataclass(frozen=True)
class SubjectData:
    """A subject's time-ordered records."""

    id: str
    records: tuple[ObservationRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if len(self.records) < 2:
            raise ParameterError(f"subject {self.id!r} has fewer than 2 records")
        times = [r.time for r in self.records]
        if any(t2 <= t1 for t1, t2 in zip(times, times[1:])):
            raise ParameterError(
                f"subject {self.id!r}: record times must be strictly increasing"
            )

    @property
    def times(self) -> np.ndarray:
        return np.array([r.time for r in self.records])

    @property
    def values(self) -> np.ndarray:
        return np.array([r.value for r in self.records])

    @property
    def censored(self) -> np.ndarray:
        return np.array([r.censored for r in self.records], dtype=bool)

    @property
    def limits(self) -> np.ndarray:
        return np.array([r.detection_limit for r in self.records])

    @classmethod
    def from_arrays(cls, id, times, values, censored, limits) -> "SubjectData":
        records = tuple(
            ObservationRecord(float(t), float(v), bool(c), float(d))
            for t, v, c, d in zip(times, values, censored, limits)
        )
        return cls(str(id), records)


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of the segmented mean structure.

    Parameters
    ----------
    pre_segment : {"linear"}
    post_segment : {"biexp", "onecomp"}
    tau_transform : {"identity", "exp"}
        Transform from the Gaussian latent change point to natural time.
    a_transforms, b_transforms : tuple of {"identity", "exp"}
        Per-latent transforms.  ``b_transforms`` defaults to all ``"exp"``
        with the length required by ``post_segment``.
    """

    pre_segment: str = "linear"
    post_segment: str = "biexp"
    tau_transform: str = "exp"
    a_transforms: tuple[str, ...] = ("identity",)
    b_transforms: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.pre_segment != "linear":
            raise ParameterError(f"unknown pre_segment {self.pre_segment!r}")
        if self.post_segment not in _POST_DIMS:
            raise ParameterError(f"unknown post_segment {self.post_segment!r}")
        if self.b_transforms is None:
            object.__setattr__(
                self, "b_transforms", ("exp",) * _POST_DIMS[self.post_segment]
            )
        object.__setattr__(self, "a_transforms", tuple(self.a_transforms))
        object.__setattr__(self, "b_transforms", tuple(self.b_transforms))
        if len(self.a_transforms) != 1:
            raise ParameterError("linear pre-segment takes exactly one latent")
        if len(self.b_transforms) != _POST_DIMS[self.post_segment]:
            raise ParameterError(
                f"{self.post_segment} post-segment takes "
                f"{_POST_DIMS[self.post_segment]} latents"
            )
        for tag in (self.tau_transform, *self.a_transforms, *self.b_transforms):
            if tag not in _TRANSFORMS:
                raise ParameterError(f"unknown latent transform {tag!r}")

    @property
    def n_a(self) -> int:
        return len(self.a_transforms)

    @property
    def n_b(self) -> int:
        return len(self.b_transforms)

    @property
    def n_latent(self) -> int:
        return self.n_a + self.n_b + 1

    @property
    def a_names(self) -> list[str]:
        return ["alpha"] if self.n_a == 1 else [f"alpha{k + 1}" for k in range(self.n_a)]

    @property
    def b_names(self) -> list[str]:
        return [f"beta{k + 1}" for k in range(self.n_b)]

    @property
    def fixed_names(self) -> list[str]:
        """Fixed-effect names, in latent-vector order ``[a, b, tau]``."""
        return self.a_names + self.b_names + ["tau"]

    def to_dict(self) -> dict:
        return {
            "pre_segment": self.pre_segment,
            "post_segment": self.post_segment,
            "tau_transform": self.tau_transform,
            "a_transforms": list(self.a_transforms),
            "b_transforms": list(self.b_transforms),
        }

    # integer codes consumed by the compiled kernels
    @property
    def post_code(self) -> int:
        return 0 if self.post_segment == "biexp" else 1

    @property
    def tau_exp(self) -> int:
        return int(self.tau_transform == "exp")

    @property
    def a_exp(self) -> np.ndarray:
        return np.array([tag == "exp" for tag in self.a_transforms], dtype=np.int32)

    @property
    def b_exp(self) -> np.ndarray:
        return np.array([tag == "exp" for tag in self.b_transforms], dtype=np.int32)


def _as_matrix(x, dim, name) -> np.ndarray:
    m = np.atleast_2d(np.asarray(x, dtype=float))
    if m.shape != (dim, dim):
        raise ParameterError(f"{name} must be {dim}x{dim}, got shape {m.shape}")
    return m


@dataclass(frozen=True)
class Theta:
    """Full parameter vector.

    The change-point mean ``tau_mean`` and all of ``alpha``/``beta`` live on
    the latent scale; ``A`` and ``B`` are latent-scale covariances.
    """

    alpha: np.ndarray
    beta: np.ndarray
    tau_mean: float
    tau_var: float
    A: np.ndarray
    B: np.ndarray
    sigma_e2: float

    def __post_init__(self):
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float)).copy()
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float)).copy()
        A = _as_matrix(self.A, alpha.size, "A").copy()
        B = _as_matrix(self.B, beta.size, "B").copy()
        for arr in (alpha, beta, A, B):
            arr.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "tau_mean", float(self.tau_mean))
        object.__setattr__(self, "tau_var", float(self.tau_var))
        object.__setattr__(self, "sigma_e2", float(self.sigma_e2))
        if not (np.allclose(A, A.T, rtol=1e-12, atol=1e-14)
                and np.allclose(B, B.T, rtol=1e-12, atol=1e-14)):
            raise ParameterError("A and B must be symmetric")

    def singular_components(self) -> list[str]:
        """Tags of components violating strict positivity."""
        bad = []
        if not self.tau_var > 0:
            bad.append("tau")
        for tag, m in (("A", self.A), ("B", self.B)):
            if np.linalg.eigvalsh(m).min() <= 0:
                bad.append(tag)
        if not self.sigma_e2 > 0:
            bad.append("sigma_e2")
        return bad

    def validate(self) -> "Theta":
        bad = self.singular_components()
        if bad:
            raise ParameterError(f"non-positive variance components: {bad}")
        return self

    @property
    def fixed(self) -> np.ndarray:
        """Fixed effects in latent-vector order ``[alpha, beta, tau]``."""
        return np.concatenate([self.alpha, self.beta, [self.tau_mean]])

    @property
    def latent_cov(self) -> np.ndarray:
        """Block-diagonal latent covariance ``blockdiag(A, B, tau_var)``."""
        pa, pb = self.alpha.size, self.beta.size
        q = pa + pb + 1
        S = np.zeros((q, q))
        S[:pa, :pa] = self.A
        S[pa:pa + pb, pa:pa + pb] = self.B
        S[-1, -1] = self.tau_var
        return S

    def replace(self, **changes) -> "Theta":
        kw = dict(
            alpha=self.alpha, beta=self.beta, tau_mean=self.tau_mean,
            tau_var=self.tau_var, A=self.A, B=self.B, sigma_e2=self.sigma_e2,
        )
        kw.update(changes)
        return Theta(**kw)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "tau_mean": self.tau_mean,
            "tau_var": self.tau_var,
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "sigma_e2": self.sigma_e2,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Theta":
        return cls(
            alpha=d["alpha"], beta=d["beta"], tau_mean=d["tau_mean"],
            tau_var=d["tau_var"], A=d["A"], B=d["B"], sigma_e2=d["sigma_e2"],
        )

    # -- internal parameterization -----------------------------------------

    def to_coords(self) -> np.ndarray:
        """Monitored coordinate vector.

        Fixed effects followed by variance components on the internal scale:
        log variances and Fisher-z (``arctanh``) correlations.
        """
        with np.errstate(divide="ignore", invalid="ignore"):
            parts = [
                self.fixed,
                [math.log(self.tau_var) if self.tau_var > 0 else -np.inf],
                _cov_to_internal(self.A),
                _cov_to_internal(self.B),
                [math.log(self.sigma_e2) if self.sigma_e2 > 0 else -np.inf],
            ]
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])

    @classmethod
    def from_coords(cls, coords, n_a: int, n_b: int) -> "Theta":
        c = np.asarray(coords, dtype=float)
        if c.size != n_coords(n_a, n_b):
            raise ParameterError("coordinate vector has the wrong length")
        i = 0
        alpha = c[i:i + n_a]; i += n_a
        beta = c[i:i + n_b]; i += n_b
        tau = c[i]; i += 1
        tau_var = math.exp(c[i]); i += 1
        na = n_a * (n_a + 1) // 2
        A = _internal_to_cov(c[i:i + na], n_a); i += na
        nb = n_b * (n_b + 1) // 2
        B = _internal_to_cov(c[i:i + nb], n_b); i += nb
        sigma_e2 = math.exp(c[i])
        return cls(alpha, beta, tau, tau_var, A, B, sigma_e2)


def n_coords(n_a: int, n_b: int) -> int:
    return n_a + n_b + 1 + 1 + n_a * (n_a + 1) // 2 + n_b * (n_b + 1) // 2 + 1


def _cov_names(tag: str, p: int) -> list[str]:
    names = [f"log_{tag}{k + 1}{k + 1}" for k in range(p)]
    names += [f"z_{tag}{k + 1}{l + 1}" for k in range(p) for l in range(k + 1, p)]
    return names


def coord_names(spec: ModelSpec) -> list[str]:
    """Names of the monitored coordinates for :meth:`Theta.to_coords`."""
    return (
        spec.fixed_names
        + ["log_sigma_tau2"]
        + _cov_names("A", spec.n_a)
        + _cov_names("B", spec.n_b)
        + ["log_sigma_e2"]
    )


def _cov_to_internal(C: np.ndarray) -> np.ndarray:
    d = np.diag(C)
    with np.errstate(divide="ignore", invalid="ignore"):
        logd = np.log(d)
        sd = np.sqrt(d)
        iu = np.triu_indices(C.shape[0], 1)
        rho = C[iu] / (sd[iu[0]] * sd[iu[1]])
        z = np.arctanh(np.clip(rho, -1.0, 1.0))
    return np.concatenate([logd, z])


def _internal_to_cov(v: np.ndarray, p: int) -> np.ndarray:
    sd = np.exp(0.5 * v[:p])
    R = np.eye(p)
    iu = np.triu_indices(p, 1)
    R[iu] = np.tanh(v[p:])
    R[(iu[1], iu[0])] = R[iu]
    return R * np.outer(sd, sd)


def internal_cov_derivatives(C: np.ndarray) -> list[np.ndarray]:
    """Derivatives of ``C`` with respect to its internal coordinates.

    Ordering follows :func:`_cov_to_internal`: log variances first, then the
    Fisher-z correlations of the upper triangle.
    """
    p = C.shape[0]
    sd = np.sqrt(np.diag(C))
    out = []
    for k in range(p):
        D = np.zeros_like(C)
        # d C_kl / d log var_k = C_kl / 2 off-diagonal, C_kk on the diagonal
        D[k, :] = 0.5 * C[k, :]
        D[:, k] += 0.5 * C[:, k]
        out.append(D)
    for k in range(p):
        for l in range(k + 1, p):
            rho = C[k, l] / (sd[k] * sd[l])
            D = np.zeros_like(C)
            D[k, l] = D[l, k] = (1.0 - rho * rho) * sd[k] * sd[l]
            out.append(D)
    return out


# ---------------------------------------------------------------------------
# latent state


@dataclass(frozen=True)
class LatentState:
    """Per-subject imputed quantities on the latent scale.

    ``y_cen`` maps record index to the imputed value of a censored record.
    """

    tau_latent: float
    a: np.ndarray
    b: np.ndarray
    y_cen: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "tau_latent", float(self.tau_latent))
        object.__setattr__(self, "a", np.atleast_1d(np.asarray(self.a, dtype=float)))
        object.__setattr__(self, "b", np.atleast_1d(np.asarray(self.b, dtype=float)))
        object.__setattr__(
            self, "y_cen", {int(k): float(v) for k, v in dict(self.y_cen).items()}
        )

    @property
    def vector(self) -> np.ndarray:
        """Latent vector ``[a, b, tau]``."""
        return np.concatenate([self.a, self.b, [self.tau_latent]])


def _tag_apply(x, tags):
    x = np.asarray(x, dtype=float)
    out = x.copy()
    for k, tag in enumerate(tags):
        if tag == "exp":
            out[..., k] = np.exp(x[..., k])
    return out


def latent_to_natural(latents: LatentState, spec: ModelSpec) -> np.ndarray:
    """Natural-scale latent vector ``[a, b, tau]``; ``exp`` applied where tagged."""
    a = _tag_apply(latents.a, spec.a_transforms)
    b = _tag_apply(latents.b, spec.b_transforms)
    tau = np.exp(latents.tau_latent) if spec.tau_transform == "exp" else latents.tau_latent
    return np.concatenate([a, b, [tau]])


# ---------------------------------------------------------------------------
# mean function


def _post_log10(s, b, spec: ModelSpec):
    """log10 post-change curve via log-sum-exp; ``b`` is (..., n_b) latent."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if spec.post_segment == "biexp":
            lb1 = _log_natural(b[..., 0], spec.b_transforms[0])
            r2 = _natural(b[..., 1], spec.b_transforms[1])
            lb3 = _log_natural(b[..., 2], spec.b_transforms[2])
            r4 = _natural(b[..., 3], spec.b_transforms[3])
            x1 = lb1 - r2 * s
            x2 = lb3 - r4 * s
        else:
            x1 = _log_natural(b[..., 0], spec.b_transforms[0])
            lb2 = _log_natural(b[..., 1], spec.b_transforms[1])
            r3 = _natural(b[..., 2], spec.b_transforms[2])
            x2 = lb2 - r3 * s
        return np.logaddexp(x1, x2) / LN10


def _log_natural(x, tag):
    return x if tag == "exp" else np.log(x)


def _natural(x, tag):
    return np.exp(x) if tag == "exp" else x


def mean_values(t, tau_latent, a, b, spec: ModelSpec) -> np.ndarray:
    """Vectorized noiseless mean.

    ``t`` and ``tau_latent`` broadcast against the leading axes of ``a``
    (shape ``(..., n_a)``) and ``b`` (shape ``(..., n_b)``).
    """
    t = np.asarray(t, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    tau_nat = _natural(np.asarray(tau_latent, dtype=float), spec.tau_transform)
    a_nat = _natural(a[..., 0], spec.a_transforms[0])
    s = t - tau_nat
    with np.errstate(invalid="ignore"):
        return a_nat * np.minimum(s, 0.0) + _post_log10(np.maximum(s, 0.0), b, spec)


def eval_mean(t, latents: LatentState, spec: ModelSpec):
    """Noiseless model mean at time(s) ``t`` for one subject.

    Raises
    ------
    DomainError
        If the mean is not finite; ``err.latent`` names the first latent that
        is non-finite or inadmissible on its natural scale.
    """
    mu = mean_values(t, latents.tau_latent, latents.a, latents.b, spec)
    if np.all(np.isfinite(mu)):
        return float(mu) if np.ndim(mu) == 0 else mu
    raise DomainError(
        f"non-finite mean (offending latent: {_offending_latent(latents, spec)})",
        latent=_offending_latent(latents, spec),
    )


def _offending_latent(latents: LatentState, spec: ModelSpec) -> str:
    names = ["a"] + [f"b{k + 1}" for k in range(spec.n_b)] + ["tau"]
    vec = latents.vector
    with np.errstate(over="ignore"):
        nat = latent_to_natural(latents, spec)
    for k, name in enumerate(names):
        if not (np.isfinite(vec[k]) and np.isfinite(nat[k])):
            return name
    # identity-tagged levels must be positive for the log10 to exist
    levels = (0, 2) if spec.post_segment == "biexp" else (0, 1)
    for k in levels:
        if spec.b_transforms[k] == "identity" and latents.b[k] <= 0:
            return f"b{k + 1}"
    # otherwise the decay exponent overflowed; blame the largest rate
    rates = (1, 3) if spec.post_segment == "biexp" else (2,)
    k = max(rates, key=lambda r: nat[spec.n_a + r])
    return f"b{k + 1}"


# ---------------------------------------------------------------------------
# observation-level densities


def _check_var(sigma_e2):
    if not sigma_e2 > 0:
        raise ParameterError(f"sigma_e2 must be positive, got {sigma_e2}")


def log_obs_density(y, mu, sigma_e2):
    """Gaussian log density of ``y`` with mean ``mu`` and variance ``sigma_e2``."""
    _check_var(sigma_e2)
    r = np.asarray(y, dtype=float) - np.asarray(mu, dtype=float)
    out = -0.5 * (LOG_2PI + math.log(sigma_e2)) - 0.5 * r * r / sigma_e2
    return float(out) if np.ndim(out) == 0 else out


def log_censored_contribution(d, mu, sigma_e2):
    """``log P(y <= d)`` for ``y ~ N(mu, sigma_e2)``."""
    _check_var(sigma_e2)
    z = (np.asarray(d, dtype=float) - np.asarray(mu, dtype=float)) / math.sqrt(sigma_e2)
    out = log_ndtr(z)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# packed containers


@dataclass(frozen=True)
class Panel:
    """All subjects' records packed into flat arrays.

    Record ``j`` of subject ``i`` sits at ``offsets[i] + j``.
    """

    ids: tuple[str, ...]
    t: np.ndarray
    y: np.ndarray
    cens: np.ndarray
    dlim: np.ndarray
    offsets: np.ndarray

    @classmethod
    def from_subjects(cls, subjects: Iterable[SubjectData]) -> "Panel":
        subjects = list(subjects)
        counts = [len(s.records) for s in subjects]
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        if subjects:
            t = np.concatenate([s.times for s in subjects])
            y = np.concatenate([s.values for s in subjects])
            c = np.concatenate([s.censored for s in subjects])
            d = np.concatenate([s.limits for s in subjects])
        else:
            t = y = d = np.zeros(0)
            c = np.zeros(0, dtype=bool)
        return cls(tuple(s.id for s in subjects), t, y, c.astype(np.uint8), d, offsets)

    def __post_init__(self):
        for name in ("t", "y", "dlim"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        cens = np.ascontiguousarray(self.cens, dtype=np.uint8)
        cens.setflags(write=False)
        object.__setattr__(self, "cens", cens)
        offs = np.ascontiguousarray(self.offsets, dtype=np.int64)
        offs.setflags(write=False)
        object.__setattr__(self, "offsets", offs)
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))

    @property
    def n_subjects(self) -> int:
        return len(self.ids)

    @property
    def n_records(self) -> int:
        return int(self.offsets[-1])

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def owner(self) -> np.ndarray:
        """Subject index of every record."""
        return np.repeat(np.arange(self.n_subjects), self.counts)

    def subject(self, i: int) -> SubjectData:
        sl = slice(self.offsets[i], self.offsets[i + 1])
        return SubjectData.from_arrays(
            self.ids[i], self.t[sl], self.y[sl], self.cens[sl].astype(bool), self.dlim[sl]
        )

    def subjects(self) -> list[SubjectData]:
        return [self.subject(i) for i in range(self.n_subjects)]

    def subset(self, index: Sequence[int]) -> "Panel":
        return Panel.from_subjects(self.subject(i) for i in index)


@dataclass
class Latents:
    """Latent arrays for a whole panel.

    ``y`` is the completed response: observed values where uncensored,
    imputed values where censored.
    """

    tau: np.ndarray
    a: np.ndarray
    b: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.tau = np.ascontiguousarray(np.atleast_1d(self.tau), dtype=float)
        n = self.tau.size
        self.a = np.ascontiguousarray(np.asarray(self.a, dtype=float).reshape(n, -1))
        self.b = np.ascontiguousarray(np.asarray(self.b, dtype=float).reshape(n, -1))
        self.y = np.ascontiguousarray(self.y, dtype=float)

    def copy(self) -> "Latents":
        return Latents(self.tau.copy(), self.a.copy(), self.b.copy(), self.y.copy())

    @property
    def vectors(self) -> np.ndarray:
        """(n, q) latent vectors ``[a, b, tau]``."""
        return np.column_stack([self.a, self.b, self.tau])

    def state(self, i: int, panel: Panel) -> LatentState:
        lo, hi = panel.offsets[i], panel.offsets[i + 1]
        cens = np.flatnonzero(panel.cens[lo:hi])
        return LatentState(
            self.tau[i], self.a[i], self.b[i],
            {int(j): float(self.y[lo + j]) for j in cens},
        )

    def states(self, panel: Panel) -> list[LatentState]:
        return [self.state(i, panel) for i in range(panel.n_subjects)]

    @classmethod
    def from_states(cls, states: Sequence[LatentState], panel: Panel) -> "Latents":
        y = panel.y.copy()
        cens = panel.cens.astype(bool)
        for i, st in enumerate(states):
            lo, hi = panel.offsets[i], panel.offsets[i + 1]
            for j in np.flatnonzero(cens[lo:hi]):
                if int(j) not in st.y_cen:
                    raise StateError(
                        f"subject {panel.ids[i]!r}: censored record {j} has no imputation"
                    )
                y[lo + j] = st.y_cen[int(j)]
        return cls(
            np.array([s.tau_latent for s in states]),
            np.array([s.a for s in states]),
            np.array([s.b for s in states]),
            y,
        )

    @classmethod
    def at_means(cls, theta: Theta, panel: Panel, y=None) -> "Latents":
        n = panel.n_subjects
        return cls(
            np.full(n, theta.tau_mean),
            np.tile(theta.alpha, (n, 1)),
            np.tile(theta.beta, (n, 1)),
            panel.y.copy() if y is None else y,
        )


def as_panel(data) -> Panel:
    return data if isinstance(data, Panel) else Panel.from_subjects(data)


def as_latents(latents, panel: Panel) -> Latents:
    return latents if isinstance(latents, Latents) else Latents.from_states(latents, panel)


def record_means(latents: Latents, panel: Panel, spec: ModelSpec) -> np.ndarray:
    """Model mean for every record of the panel."""
    own = panel.owner
    return mean_values(panel.t, latents.tau[own], latents.a[own], latents.b[own], spec)


# ---------------------------------------------------------------------------
# complete-data log-likelihood


@dataclass(frozen=True)
class LoglikParts:
    total: float
    parts: tuple[float, float, float, float]


def _gauss_block(x, mean, cov, n):
    """``-n log 2pi - n/2 log|C| - 1/2 sum quad``: the displayed constant."""
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise ParameterError("covariance must be positive definite")
    r = x - mean
    quad = np.einsum("ij,ij->", r @ np.linalg.inv(cov), r)
    return -n * LOG_2PI - 0.5 * n * logdet - 0.5 * quad


def complete_data_loglik(theta: Theta, latents, data, spec: ModelSpec) -> LoglikParts:
    """Complete-data log-likelihood and its four-part breakdown.

    Parts are (change point, pre-effects, post-effects, observations), all
    evaluated on the latent scale.  Constants follow the classical display:
    no ``2 pi`` term in the change-point and observation parts,
    ``-n log(2 pi)`` in each random-effect part.
    """
    panel = as_panel(data)
    lat = as_latents(latents, panel)
    theta.validate()
    n = panel.n_subjects
    l1 = float(np.sum(
        -0.5 * math.log(theta.tau_var) - (lat.tau - theta.tau_mean) ** 2 / (2.0 * theta.tau_var)
    ))
    l2 = float(_gauss_block(lat.a, theta.alpha, theta.A, n))
    l3 = float(_gauss_block(lat.b, theta.beta, theta.B, n))
    mu = record_means(lat, panel, spec)
    if not np.all(np.isfinite(mu)):
        raise DomainError("non-finite mean in complete-data likelihood")
    r = lat.y - mu
    l4 = float(-0.5 * panel.n_records * math.log(theta.sigma_e2)
               - 0.5 * np.sum(r * r) / theta.sigma_e2)
    parts = (l1, l2, l3, l4)
    return LoglikParts(l1 + l2 + l3 + l4, parts)
