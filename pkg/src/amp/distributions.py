"""Truncatable distributions over network depth.

All families are defined over the integers x >= 0. Layer ``l`` (1-based)
takes the mass at ``x = l``; the mass at 0 is dropped and the kept weights
are renormalized, so a truncated support ``L_hat`` means layers 1..L_hat.

Positive parameters (rate, sigma) are stored as logs. ``pmf`` is
tape-connected; ``pmf_values``/``cmf`` are plain floats for truncation.
"""
from __future__ import annotations

import math
from statistics import NormalDist

import numpy as np
from scipy import special

from amp import autodiff as ad
from amp.autodiff import ContractError, Parameter, Tensor

_SQRT2 = math.sqrt(2.0)
_STD_NORMAL = NormalDist()


class GrowthCapError(RuntimeError):
    """Truncation point beyond the configured cap (runaway variance)."""


def fn_cdf(x, mu: float, sigma: float):
    """Folded normal c.d.f. ``S_FN(x; mu, sigma)`` for x >= 0."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (special.erf((x - mu) / (sigma * _SQRT2)) + special.erf((x + mu) / (sigma * _SQRT2)))


def _as_ints(xs) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(xs, dtype=np.int64))
    if np.any(arr < 0):
        raise ContractError("depth distributions are defined for x >= 0")
    return arr


def _dfn_pmf_tensor(xs: np.ndarray, mu: Tensor, sigma: Tensor) -> Tensor:
    scale = sigma * _SQRT2
    lo = xs.astype(np.float64)
    hi = lo + 1.0
    left = ad.erf_diff((lo - mu) / scale, (hi - mu) / scale)
    right = ad.erf_diff((lo + mu) / scale, (hi + mu) / scale)
    return 0.5 * (left + right)


def dfn_quantile_bounds(mu: float, sigma: float, c: float) -> tuple[int, int]:
    """Integer bounds on the c-quantile of a discrete folded normal.

    Lower: the Gaussian quantile is reached no later than the folded one.
    Upper: Chernoff bound on the folded normal tail with t = 1/sigma.
    """
    if not 0.0 < c < 1.0:
        raise ContractError(f"quantile level must lie in (0, 1), got {c}")
    if sigma <= 0.0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    mu = abs(mu)  # FN(mu) and FN(-mu) coincide
    x_gauss = mu + sigma * _STD_NORMAL.inv_cdf(c)
    lower = max(0, math.floor(x_gauss) - 1)
    r = mu / sigma
    k = math.exp(0.5) * (special.ndtr(r + 1.0) + special.ndtr(1.0 - r) * math.exp(-2.0 * r))
    x_chernoff = mu + sigma * math.log(k) - sigma * math.log1p(-c)
    upper = max(lower, math.ceil(x_chernoff) - 1)
    return lower, upper


class DepthDistribution:
    family = ""

    def __init__(self, quantile: float = 0.99):
        if not 0.0 < quantile < 1.0:
            raise ContractError(f"truncation quantile must lie in (0, 1), got {quantile}")
        self.quantile = quantile
        self.support: int | None = None

    def parameters(self) -> list[Parameter]:
        return []

    def pmf(self, xs) -> Tensor:
        raise NotImplementedError

    def pmf_values(self, xs) -> np.ndarray:
        with ad.no_grad():
            return self.pmf(xs).data.copy()

    def cmf(self, x) -> np.ndarray:
        raise NotImplementedError

    def quantile_bounds(self, c: float | None = None) -> tuple[int, int]:
        raise NotImplementedError

    def _quantile(self) -> int:
        lo, hi = self.quantile_bounds()
        c = self.quantile
        while lo < hi:
            mid = (lo + hi) // 2
            if self.cmf(mid)[0] >= c:
                hi = mid
            else:
                lo = mid + 1
        return lo

    def truncate(self) -> int:
        """Cache and return ``L_hat = max(1, min{x : cmf(x) >= c})``."""
        self.support = max(1, self._quantile())
        return self.support

    def _require_support(self) -> int:
        if self.support is None:
            raise ContractError("call truncate() before using the truncated support")
        return self.support

    def layer_weights(self) -> Tensor:
        """Renormalized q(l) for layers 1..L_hat (tape-connected)."""
        n = self._require_support()
        raw = self.pmf(np.arange(1, n + 1))
        total = raw.sum()
        if total.item() < 1e-300:
            # all kept mass underflowed; fall back to the deepest layer
            onehot = np.zeros(n)
            onehot[-1] = 1.0
            return Tensor(onehot)
        return raw / total

    def renormalized_weights(self) -> np.ndarray:
        with ad.no_grad():
            return self.layer_weights().data.copy()

    def raw_params(self) -> dict[str, list[float]]:
        return {p.name.split(".")[-1]: p.data.tolist() for p in self.parameters()}

    def describe(self) -> dict[str, float]:
        """Human-readable parameter values (after positivity transforms)."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "quantile": self.quantile,
            "support": self.support,
            "params": self.raw_params(),
        }


class TruncatedPoisson(DepthDistribution):
    family = "poisson"

    def __init__(self, rate: float = 10.0, quantile: float = 0.99, cap: int = 200, name: str = "depth"):
        super().__init__(quantile)
        if rate <= 0:
            raise ContractError(f"rate must be positive, got {rate}")
        self.cap = cap
        self.log_rate = Parameter([math.log(rate)], name=f"{name}.log_rate")

    @property
    def rate(self) -> float:
        return math.exp(self.log_rate.item())

    def parameters(self):
        return [self.log_rate]

    def pmf(self, xs) -> Tensor:
        xs = _as_ints(xs)
        const = -special.gammaln(xs + 1.0)
        return ad.exp(xs.astype(np.float64) * self.log_rate - ad.exp(self.log_rate) + const)

    def cmf(self, x) -> np.ndarray:
        return np.atleast_1d(special.pdtr(_as_ints(x), self.rate))

    def quantile_bounds(self, c=None):
        raise ContractError("Poisson truncation uses a forward scan, not analytic bounds")

    def _quantile(self) -> int:
        c = self.quantile
        # pmf recursion in log space from x = 0
        lam = self.rate
        total = 0.0
        log_p = -lam
        for x in range(self.cap + 1):
            total += math.exp(log_p)
            if total >= c:
                return x
            log_p += math.log(lam) - math.log(x + 1)
        raise GrowthCapError(f"Poisson(rate={lam:.4g}) quantile {c} exceeds cap {self.cap}")

    def describe(self):
        return {"rate": self.rate}


class DiscreteFoldedNormal(DepthDistribution):
    family = "dfn"

    def __init__(self, mu: float = 10.0, sigma: float = 5.0, quantile: float = 0.99, name: str = "depth"):
        super().__init__(quantile)
        if sigma <= 0:
            raise ContractError(f"sigma must be positive, got {sigma}")
        self.mu = Parameter([mu], name=f"{name}.mu")
        self.log_sigma = Parameter([math.log(sigma)], name=f"{name}.log_sigma")

    @property
    def sigma(self) -> float:
        return math.exp(self.log_sigma.item())

    def parameters(self):
        return [self.mu, self.log_sigma]

    def pmf(self, xs) -> Tensor:
        return _dfn_pmf_tensor(_as_ints(xs), self.mu, ad.exp(self.log_sigma))

    def cmf(self, x) -> np.ndarray:
        # S_DFN(x) = S_FN(x + 1)
        return np.atleast_1d(fn_cdf(_as_ints(x) + 1.0, self.mu.item(), self.sigma))

    def quantile_bounds(self, c=None):
        return dfn_quantile_bounds(self.mu.item(), self.sigma, self.quantile if c is None else c)

    def describe(self):
        return {"mu": self.mu.item(), "sigma": self.sigma}


class MixtureDFN(DepthDistribution):
    family = "mixture"

    def __init__(self, mus=(5.0, 15.0), sigmas=(3.0, 3.0), logits=None, quantile: float = 0.99, name: str = "depth"):
        super().__init__(quantile)
        if len(mus) != len(sigmas):
            raise ContractError("mixture needs one sigma per mean")
        if any(s <= 0 for s in sigmas):
            raise ContractError("mixture sigmas must be positive")
        k = len(mus)
        self.mus = Parameter(list(mus), name=f"{name}.mus")
        self.log_sigmas = Parameter(np.log(sigmas), name=f"{name}.log_sigmas")
        self.logits = Parameter(np.zeros(k) if logits is None else list(logits), name=f"{name}.logits")

    @property
    def n_components(self) -> int:
        return self.mus.size

    def weights(self) -> np.ndarray:
        return special.softmax(self.logits.data)

    def parameters(self):
        return [self.mus, self.log_sigmas, self.logits]

    def pmf(self, xs) -> Tensor:
        xs = _as_ints(xs)
        shifted = self.logits - float(self.logits.data.max())
        e = ad.exp(shifted)
        w = e / e.sum()
        sigmas = ad.exp(self.log_sigmas)
        total = None
        for i in range(self.n_components):
            comp = _dfn_pmf_tensor(xs, ad.gather(self.mus, [i]), ad.gather(sigmas, [i]))
            term = ad.gather(w, [i]) * comp
            total = term if total is None else total + term
        return total

    def component_cmf(self, i: int, x) -> np.ndarray:
        sig = math.exp(self.log_sigmas.data[i])
        return np.atleast_1d(fn_cdf(_as_ints(x) + 1.0, self.mus.data[i], sig))

    def cmf(self, x) -> np.ndarray:
        w = self.weights()
        return sum(w[i] * self.component_cmf(i, x) for i in range(self.n_components))

    def quantile_bounds(self, c=None):
        c = self.quantile if c is None else c
        bounds = [
            dfn_quantile_bounds(self.mus.data[i], math.exp(self.log_sigmas.data[i]), c)
            for i in range(self.n_components)
        ]
        return min(b[0] for b in bounds), max(b[1] for b in bounds)

    def describe(self):
        out = {}
        w = self.weights()
        for i in range(self.n_components):
            out[f"mu{i + 1}"] = float(self.mus.data[i])
            out[f"sigma{i + 1}"] = float(math.exp(self.log_sigmas.data[i]))
            out[f"w{i + 1}"] = float(w[i])
        return out


class FixedDepth(DepthDistribution):
    """Point mass on a single depth; used for fixed-depth baselines."""

    family = "fixed"

    def __init__(self, depth: int, quantile: float = 0.99):
        super().__init__(quantile)
        if depth < 1:
            raise ContractError("fixed depth must be at least 1")
        self.depth = int(depth)

    def pmf(self, xs) -> Tensor:
        xs = _as_ints(xs)
        return Tensor((xs == self.depth).astype(np.float64))

    def cmf(self, x) -> np.ndarray:
        return (_as_ints(x) >= self.depth).astype(np.float64)

    def _quantile(self) -> int:
        return self.depth

    def describe(self):
        return {"depth": float(self.depth)}

    def to_dict(self):
        d = super().to_dict()
        d["params"] = {"depth": [self.depth]}
        return d


def scan_quantile(dist: DepthDistribution, c: float | None = None, cap: int = 100_000) -> int:
    """Linear scan for ``min{x : cmf(x) >= c}``; reference for the binary search."""
    c = dist.quantile if c is None else c
    for x in range(cap + 1):
        if dist.cmf(x)[0] >= c:
            return x
    raise GrowthCapError(f"no quantile found below {cap}")


def distribution_from_dict(d: dict, name: str = "depth") -> DepthDistribution:
    family = d["family"]
    params = d["params"]
    q = d.get("quantile", 0.99)
    if family == "poisson":
        dist = TruncatedPoisson(1.0, quantile=q, cap=d.get("cap", 200), name=name)
        dist.log_rate.data[:] = params["log_rate"]
    elif family == "dfn":
        dist = DiscreteFoldedNormal(0.0, 1.0, quantile=q, name=name)
        dist.mu.data[:] = params["mu"]
        dist.log_sigma.data[:] = params["log_sigma"]
    elif family == "mixture":
        k = len(params["mus"])
        dist = MixtureDFN([0.0] * k, [1.0] * k, quantile=q, name=name)
        dist.mus.data[:] = params["mus"]
        dist.log_sigmas.data[:] = params["log_sigmas"]
        dist.logits.data[:] = params["logits"]
    elif family == "fixed":
        dist = FixedDepth(int(params["depth"][0]), quantile=q)
    else:
        raise ContractError(f"unknown depth family {family!r}")
    dist.support = d.get("support")
    return dist


class LayerPrior:
    """Fixed prior p(l) over layers 1, 2, ... with the same x = l convention."""

    KINDS = ("uninformative", "poisson", "folded_normal")

    def __init__(self, kind: str = "uninformative", rate: float = 5.0, mu: float = 5.0, sigma: float = 10.0):
        if kind not in self.KINDS:
            raise ContractError(f"unknown prior kind {kind!r}")
        self.kind = kind
        self.rate = rate
        self.mu = mu
        self.sigma = sigma

    def log_pmf(self, layers) -> np.ndarray:
        ls = _as_ints(layers).astype(np.float64)
        tiny_log = math.log(np.finfo(np.float64).tiny)
        if self.kind == "uninformative":
            return np.zeros_like(ls)
        if self.kind == "poisson":
            return ls * math.log(self.rate) - self.rate - special.gammaln(ls + 1.0)
        p = fn_cdf(ls + 1.0, self.mu, self.sigma) - fn_cdf(ls, self.mu, self.sigma)
        return np.log(np.maximum(p, np.finfo(np.float64).tiny)).clip(min=tiny_log)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "rate": self.rate, "mu": self.mu, "sigma": self.sigma}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerPrior":
        return cls(**d)


def depth_elbo_terms(dist: DepthDistribution, prior: LayerPrior) -> tuple[Tensor, Tensor]:
    """Entropy ``-sum q ln q`` and cross term ``sum q ln p`` over the truncated support.

    The uninformative prior contributes a constant, reported as 0.
    """
    n = dist._require_support()
    q = dist.layer_weights()
    entropy = -ad.xlogx(q).sum()
    if prior.kind == "uninformative":
        cross = Tensor([0.0])
    else:
        cross = (q * Tensor(prior.log_pmf(np.arange(1, n + 1)))).sum()
    return entropy, cross
