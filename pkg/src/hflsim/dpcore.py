"""Gaussian mechanism, per-site noise calibration and hierarchical privacy budgets.

Budgets are reported at three observation levels: a client's own release, the
zone's super-node, and the central aggregator. Amplification between levels is
the Gaussian-sum rule eps / sqrt(fan-in).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from hflsim.errors import ConfigurationError
from hflsim.numkit import ClipMode, ParamVector
from hflsim.rdp import DEFAULT_ORDERS, rdp_subsampled_gaussian, rdp_to_epsilon

PLACEMENTS = ("none", "C1", "C2", "C3", "C4", "C5", "C6", "C7")
DEFAULT_DELTA = 1e-5

# noising sites used by each placement: (clients, super-nodes, aggregator)
SITES = {
    "none": (False, False, False),
    "C1": (True, False, False),
    "C2": (False, True, False),
    "C3": (True, True, False),
    "C4": (False, False, True),
    "C5": (True, False, True),
    "C6": (False, True, True),
    "C7": (True, True, True),
}

PLACEMENT_NAMES = {"none": "NoDP", "C1": "LDP", "C2": "HDP", "C4": "CDP"}


@dataclass(frozen=True)
class DpPolicy:
    placement: str = "none"
    clip: ClipMode = field(default_factory=ClipMode)
    z: float = 0.0
    delta: float = DEFAULT_DELTA
    user_cap: float = 1.0
    q: float = 1.0
    alpha: Optional[float] = None
    beta: Optional[float] = None
    w_min: Optional[float] = None

    def __post_init__(self) -> None:
        if self.placement not in PLACEMENTS:
            raise ConfigurationError(f"unknown placement {self.placement!r}; expected one of {PLACEMENTS}")
        if self.z < 0:
            raise ConfigurationError("noise multiplier z must be nonnegative")
        if not 0.0 < self.delta < 1.0:
            raise ConfigurationError("delta must lie in (0, 1)")
        if self.user_cap <= 0:
            raise ConfigurationError("user cap must be positive")
        if not 0.0 < self.q <= 1.0:
            raise ConfigurationError("selection probability q must lie in (0, 1]")
        _check_fractions(self.placement, self.alpha, self.beta)

    @property
    def noisy(self) -> bool:
        return self.placement != "none" and self.z > 0


def _check_fractions(placement: str, alpha: Optional[float], beta: Optional[float]) -> None:
    needs_alpha = placement in ("C5", "C7")
    needs_beta = placement in ("C3", "C6", "C7")
    for name, value, needed in (("alpha", alpha, needs_alpha), ("beta", beta, needs_beta)):
        if needed and value is None:
            raise ConfigurationError(f"placement {placement} requires {name}")
        if value is not None and not 0.0 <= value <= 1.0:
            raise ConfigurationError(f"{name} must lie in [0, 1], got {value}")
    if placement == "C7" and alpha + beta > 1.0 + 1e-12:  # type: ignore[operator]
        raise ConfigurationError(f"C7 requires alpha + beta <= 1, got {alpha} + {beta}")


def gaussian_noise(like: int | ParamVector, sigma: float, rng: np.random.Generator) -> ParamVector:
    """i.i.d. N(0, sigma^2) per coordinate, shaped like ``like`` (or flat of that length)."""
    if sigma < 0:
        raise ConfigurationError("sigma must be nonnegative")
    template = like if isinstance(like, ParamVector) else ParamVector.flat(np.zeros(int(like)), "noise")
    if sigma == 0:
        return template.zeros_like()
    return template.like(rng.normal(0.0, sigma, size=template.size))


def sigma_for_zone(policy: DpPolicy, weight: float) -> float:
    """Noise std for a zonal average: z*S/(q*W) for flat clipping, 2*z*S/(q*W_min) per layer.

    ``weight`` is W (flat) or W_min (per-layer).
    """
    denom = policy.q * weight
    if denom <= 0:
        raise ConfigurationError("q * W must be positive")
    sens = policy.clip.sensitivity
    if policy.clip.mode == "flat":
        return policy.z * sens / denom
    return 2.0 * policy.z * sens / denom


def sigma_for_denominator(z: float, sensitivity: float, denom: float, per_layer: bool = False) -> float:
    """Noise std for a weighted sum of clipped updates divided by ``denom``."""
    if denom <= 0:
        raise ConfigurationError("averaging denominator must be positive")
    return (2.0 if per_layer else 1.0) * z * sensitivity / denom


def user_weight(n_k: float, user_cap: float) -> float:
    if n_k < 0 or user_cap <= 0:
        raise ConfigurationError("need n_k >= 0 and user_cap > 0")
    return min(n_k / user_cap, 1.0)


def classic_gm_epsilon(z: float, delta: float = DEFAULT_DELTA) -> float:
    """Epsilon of the classic Gaussian mechanism at noise multiplier ``z`` (c^2 = 2 ln(1.25/delta))."""
    if not 0.0 < delta < 1.0:
        raise ConfigurationError("delta must lie in (0, 1)")
    if z <= 0:
        return math.inf
    return math.sqrt(2.0 * math.log(1.25 / delta)) / z


def amplify_by_fanin(eps: float, fanins: Iterable[float]) -> float:
    fanins = list(fanins)
    if any(k < 1 for k in fanins):
        raise ConfigurationError("fan-ins must be >= 1")
    return eps / math.sqrt(math.prod(fanins))


def amplify_by_shuffling(eps: float, k: float) -> float:
    """Gaussian-sum plus shuffling amplification, eps / k. Reporting only."""
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    return eps / k


def config_budget(
    cfg: str,
    eps: float,
    s: Optional[float] = None,
    m: Optional[float] = None,
    alpha: Optional[float] = None,
    beta: Optional[float] = None,
    k: Optional[float] = None,
    shuffling: bool = False,
) -> float:
    """Aggregator-level budget of configuration C1..C7.

    Terms belonging to a population of zero weight (a fraction equal to 0, or the
    remainder when a fraction equals 1) are dropped. ``k`` defaults to ``s * m``.
    With ``shuffling`` the square roots are removed.
    """
    if cfg not in PLACEMENTS or cfg == "none":
        raise ConfigurationError(f"unknown configuration {cfg!r}")
    _check_fractions(cfg, alpha, beta)
    if k is None and s is not None and m is not None:
        k = s * m

    def need(name: str, value: Optional[float]) -> float:
        if value is None:
            raise ConfigurationError(f"{cfg} requires {name}")
        if value <= 0:
            raise ConfigurationError(f"{name} must be positive")
        return float(value)

    def term(count: float) -> float:
        return eps / (count if shuffling else math.sqrt(count))

    if cfg == "C1":
        return term(need("k", k))
    if cfg == "C2":
        return term(need("s", s))
    if cfg == "C4":
        return eps
    total = 0.0
    if cfg == "C3":
        s_, m_ = need("s", s), need("m", m)
        if beta > 0:  # type: ignore[operator]
            total += term(beta * s_ * m_)  # type: ignore[operator]
        if beta < 1:  # type: ignore[operator]
            total += term((1.0 - beta) * s_)  # type: ignore[operator]
    elif cfg == "C5":
        k_ = need("k", k)
        if alpha > 0:  # type: ignore[operator]
            total += term(alpha * k_)  # type: ignore[operator]
        if alpha < 1:  # type: ignore[operator]
            total += eps
    elif cfg == "C6":
        s_ = need("s", s)
        if beta > 0:  # type: ignore[operator]
            total += term(beta * s_)  # type: ignore[operator]
        if beta < 1:  # type: ignore[operator]
            total += eps
    else:  # C7
        s_, m_ = need("s", s), need("m", m)
        if beta > 0:  # type: ignore[operator]
            total += term(beta * s_ * m_)  # type: ignore[operator]
        if alpha > 0:  # type: ignore[operator]
            total += term(alpha * s_)  # type: ignore[operator]
        if alpha + beta < 1:  # type: ignore[operator]
            total += eps
    return total


def level_epsilons(
    placement: str,
    eps_site: float,
    k: float,
    s: float,
    m_min: float,
    alpha: Optional[float] = None,
    beta: Optional[float] = None,
) -> dict[str, float]:
    """Budgets seen at client, super-node and aggregator level for a site-level epsilon.

    ``k`` online clients, ``s`` active zones, ``m_min`` online clients in the
    smallest active zone. A level that sees some update before any noise is
    added gets ``inf``.
    """
    inf = math.inf
    if placement == "none" or not math.isfinite(eps_site):
        return {"client": inf, "supernode": inf, "aggregator": inf}
    k, s, m_min = max(k, 1), max(s, 1), max(m_min, 1)
    m = k / s
    ldp_zone = amplify_by_fanin(eps_site, [m_min])
    if placement == "C1":
        return {"client": eps_site, "supernode": ldp_zone, "aggregator": amplify_by_fanin(eps_site, [k])}
    if placement == "C2":
        return {"client": inf, "supernode": eps_site, "aggregator": amplify_by_fanin(eps_site, [s])}
    if placement == "C4":
        return {"client": inf, "supernode": inf, "aggregator": eps_site}
    agg = config_budget(placement, eps_site, s=s, m=m, alpha=alpha, beta=beta, k=k)
    if placement == "C3":
        client = eps_site if beta == 1 else inf
        zone = max(ldp_zone if beta > 0 else 0.0, eps_site if beta < 1 else 0.0)  # type: ignore[operator]
    elif placement == "C5":
        client = eps_site if alpha == 1 else inf
        zone = ldp_zone if alpha == 1 else inf
    elif placement == "C6":
        client = inf
        zone = eps_site if beta == 1 else inf
    else:
        client = eps_site if beta == 1 else inf
        if alpha + beta < 1:  # type: ignore[operator]
            zone = inf
        else:
            zone = max(ldp_zone if beta > 0 else 0.0, eps_site if alpha > 0 else 0.0)  # type: ignore[operator]
    return {"client": client, "supernode": zone, "aggregator": agg}


@dataclass(frozen=True)
class RoundEntry:
    round: int
    q: float
    z: float
    sites: int
    k_online: int
    s_active: int
    m_min: int
    sensitivity: float = 1.0
    sigma: float = 0.0


@dataclass(frozen=True)
class PrivacyLedger:
    """Accumulated RDP of the noising sites plus per-round budgets at each level."""

    placement: str = "none"
    delta: float = DEFAULT_DELTA
    alpha: Optional[float] = None
    beta: Optional[float] = None
    orders: tuple[float, ...] = DEFAULT_ORDERS
    entries: tuple[RoundEntry, ...] = ()
    rdp: Optional[np.ndarray] = None
    history: tuple[dict[str, float], ...] = ()
    lemma_mode: bool = True

    @property
    def rounds(self) -> int:
        return len(self.entries)

    def _latest(self, key: str) -> float:
        return self.history[-1][key] if self.history else 0.0

    @property
    def eps_site(self) -> float:
        return self._latest("site")

    @property
    def eps_client(self) -> float:
        return self._latest("client")

    @property
    def eps_supernode(self) -> float:
        return self._latest("supernode")

    @property
    def eps_aggregator(self) -> float:
        return self._latest("aggregator")

    def shuffled_aggregator(self) -> float:
        """Aggregator budget with shuffling amplification (square roots removed). Reporting only."""
        if not self.entries or not math.isfinite(self.eps_site):
            return math.inf
        k = min(e.k_online for e in self.entries)
        s = min(e.s_active for e in self.entries)
        if self.placement == "C4":
            return self.eps_site
        if self.placement == "C1":
            return amplify_by_shuffling(self.eps_site, k)
        if self.placement == "C2":
            return amplify_by_shuffling(self.eps_site, s)
        return config_budget(self.placement, self.eps_site, s=s, m=k / s, alpha=self.alpha, beta=self.beta, k=k, shuffling=True)

    def to_dict(self) -> dict:
        def clean(x: float) -> Optional[float]:
            return float(x) if math.isfinite(x) else None

        return {
            "placement": self.placement,
            "delta": self.delta,
            "alpha": self.alpha,
            "beta": self.beta,
            "lemma_mode": self.lemma_mode,
            "rounds": self.rounds,
            "eps": {
                "site": clean(self.eps_site),
                "client": clean(self.eps_client),
                "supernode": clean(self.eps_supernode),
                "aggregator": clean(self.eps_aggregator),
            },
            "entries": [
                {
                    "round": e.round,
                    "q": e.q,
                    "z": e.z,
                    "sites": e.sites,
                    "k_online": e.k_online,
                    "s_active": e.s_active,
                    "sigma": e.sigma,
                    "sensitivity": e.sensitivity,
                    **{f"eps_{lvl}": clean(h[lvl]) for lvl in ("site", "client", "supernode", "aggregator")},
                }
                for e, h in zip(self.entries, self.history)
            ],
        }


def accountant_compose(ledger: PrivacyLedger, entry: RoundEntry) -> PrivacyLedger:
    """Add one round to the ledger and recompute cumulative budgets at every level.

    Level budgets use the smallest fan-ins seen so far, which is the conservative
    choice when online counts vary between rounds.
    """
    step = rdp_subsampled_gaussian(entry.q, entry.z, ledger.orders) if ledger.placement != "none" else None
    if step is None:
        rdp = None
        eps_site = math.inf
    else:
        rdp = step if ledger.rdp is None else ledger.rdp + step
        eps_site = rdp_to_epsilon(ledger.orders, rdp, ledger.delta)[0]
    entries = ledger.entries + (entry,)
    levels = level_epsilons(
        ledger.placement,
        eps_site,
        k=min(e.k_online for e in entries),
        s=min(e.s_active for e in entries),
        m_min=min(e.m_min for e in entries),
        alpha=ledger.alpha,
        beta=ledger.beta,
    )
    return replace(ledger, entries=entries, rdp=rdp, history=ledger.history + ({"site": eps_site, **levels},))


def accountant_epsilon(q: float, z: float, rounds: int, delta: float = DEFAULT_DELTA, orders: Sequence[float] = DEFAULT_ORDERS) -> float:
    """Site-level epsilon after ``rounds`` identical subsampled Gaussian rounds."""
    if rounds <= 0:
        return 0.0
    return rdp_to_epsilon(orders, rounds * rdp_subsampled_gaussian(q, z, orders), delta)[0]
