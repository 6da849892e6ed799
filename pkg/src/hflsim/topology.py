"""Zones, per-round client sampling and super-node election."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from hflsim.errors import ConfigurationError


@dataclass(frozen=True, eq=False)
class Topology:
    """Disjoint zones over clients ``0..n-1``; ``sizes[c]`` is client c's dataset size."""

    zones: tuple[tuple[int, ...], ...]
    sizes: tuple[int, ...]

    def __post_init__(self) -> None:
        zones = tuple(tuple(int(c) for c in z) for z in self.zones)
        object.__setattr__(self, "zones", zones)
        object.__setattr__(self, "sizes", tuple(int(n) for n in self.sizes))
        if any(len(z) == 0 for z in zones):
            raise ConfigurationError("every zone needs at least one client")
        members = [c for z in zones for c in z]
        if len(members) != len(set(members)):
            raise ConfigurationError("zones overlap")
        if sorted(members) != list(range(len(self.sizes))):
            raise ConfigurationError("zones must cover clients 0..n-1 exactly once")

    @property
    def s(self) -> int:
        return len(self.zones)

    @property
    def n(self) -> int:
        return len(self.sizes)

    @property
    def zone_sizes(self) -> list[int]:
        return [len(z) for z in self.zones]

    def zone_of(self) -> np.ndarray:
        out = np.empty(self.n, dtype=np.int64)
        for i, z in enumerate(self.zones):
            out[list(z)] = i
        return out

    def to_dict(self) -> dict:
        return {"zones": [{"zone": i, "clients": {str(c): self.sizes[c] for c in z}} for i, z in enumerate(self.zones)]}

    @classmethod
    def from_dict(cls, data: dict) -> "Topology":
        zones, sizes = [], {}
        for entry in sorted(data["zones"], key=lambda e: e["zone"]):
            clients = {int(c): int(n) for c, n in entry["clients"].items()}
            zones.append(tuple(clients))
            sizes.update(clients)
        return cls(tuple(zones), tuple(sizes[c] for c in range(len(sizes))))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Topology":
        return cls.from_dict(json.loads(text))


def build_topology(
    num_clients: int,
    num_zones: int,
    assignment: str = "equal",
    zone_lists: Optional[Sequence[Sequence[int]]] = None,
    client_sizes: Optional[Sequence[int]] = None,
) -> Topology:
    """``equal`` deals clients round-robin into zones; ``by-list`` uses ``zone_lists``."""
    if not 0 < num_zones <= num_clients:
        raise ConfigurationError(f"need 0 < zones <= clients, got {num_zones} zones for {num_clients} clients")
    sizes = tuple(client_sizes) if client_sizes is not None else (1,) * num_clients
    if len(sizes) != num_clients:
        raise ConfigurationError("client_sizes length differs from num_clients")
    if assignment == "equal":
        zones = tuple(tuple(range(i, num_clients, num_zones)) for i in range(num_zones))
    elif assignment == "by-list":
        if zone_lists is None or len(zone_lists) != num_zones:
            raise ConfigurationError("by-list assignment needs one client list per zone")
        zones = tuple(tuple(z) for z in zone_lists)
    else:
        raise ConfigurationError(f"unknown assignment {assignment!r}")
    return Topology(zones, sizes)


@dataclass
class RoundView:
    round: int
    online: list[np.ndarray]
    supernodes: list[Optional[int]] = field(default_factory=list)

    @property
    def k_online(self) -> int:
        return int(sum(o.size for o in self.online))

    @property
    def zone_counts(self) -> list[int]:
        return [int(o.size) for o in self.online]

    @property
    def active_zones(self) -> list[int]:
        return [i for i, o in enumerate(self.online) if o.size]

    def all_online(self) -> np.ndarray:
        return np.sort(np.concatenate(self.online)) if self.online else np.empty(0, dtype=np.int64)


def sample_online(
    topology: Topology,
    q: float,
    rng: np.random.Generator,
    mode: str = "bernoulli",
    k: Optional[int] = None,
    round_: int = 0,
) -> RoundView:
    """Online clients for one round.

    ``bernoulli``: each client independently with probability q.
    ``fixed_k``: exactly k clients uniformly without replacement.
    """
    if mode == "bernoulli":
        if not 0.0 < q <= 1.0:
            raise ConfigurationError("q must lie in (0, 1]")
        mask = rng.random(topology.n) < q
    elif mode == "fixed_k":
        if k is None or not 0 < k <= topology.n:
            raise ConfigurationError(f"fixed_k sampling needs 0 < k <= {topology.n}")
        mask = np.zeros(topology.n, dtype=bool)
        mask[rng.choice(topology.n, size=k, replace=False)] = True
    else:
        raise ConfigurationError(f"unknown sampling mode {mode!r}")
    online = [np.array([c for c in zone if mask[c]], dtype=np.int64) for zone in topology.zones]
    return RoundView(round_, online, [None] * topology.s)


@dataclass
class ElectionState:
    incumbents: dict[int, int] = field(default_factory=dict)
    term_start: dict[int, int] = field(default_factory=dict)


def elect_supernode(
    online: Sequence[int] | np.ndarray,
    state: ElectionState,
    rng: np.random.Generator,
    zone: int = 0,
    round_: int = 0,
) -> Optional[int]:
    """Keep an online incumbent, otherwise elect uniformly among the online clients.

    Returns None (zone inactive) when nobody is online.
    """
    online = np.asarray(online, dtype=np.int64)
    incumbent = state.incumbents.get(zone)
    if online.size == 0:
        state.incumbents.pop(zone, None)
        state.term_start.pop(zone, None)
        return None
    if incumbent is not None and incumbent in online:
        return incumbent
    winner = int(online[rng.integers(online.size)])
    state.incumbents[zone] = winner
    state.term_start[zone] = round_
    return winner


def check_fault_thresholds(zone_sizes: Sequence[int], zeta: int) -> list[dict]:
    """Crash- and byzantine-fault thresholds per zone, with all ``zeta`` adversaries in that zone."""
    if zeta < 0:
        raise ConfigurationError("adversary count must be nonnegative")
    return [
        {
            "zone": i,
            "k": int(k),
            "zeta": int(zeta),
            "crash_ft": zeta < (k - 1) / 2,
            "byzantine_ft": zeta <= (k - 1) / 3,
        }
        for i, k in enumerate(zone_sizes)
    ]
