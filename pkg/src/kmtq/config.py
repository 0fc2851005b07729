"""Experiment configuration: TOML files, defaults per kind, validation."""
from __future__ import annotations

import math
import tomllib
from dataclasses import dataclass, field, replace
from pathlib import Path

from kmtq import dist
from kmtq.dist import DistributionSpec
from kmtq.storage import ValidationError

KINDS = (
    "couple-arrival", "couple-workload", "couple-remaining-workload", "couple-queue",
    "couple-timechange", "kmt-empirical", "validate-bounds", "simulate-only",
)
CORRECTIONS = ("sqrt-log-n", "log-n", "none", "sqrt-log-cn")
METRICS = (
    "arrival", "workload", "remaining-workload", "queue",
    "empirical", "timechange", "service-walk", "kmt-empirical",
)
C_RULES = ("critical", "polynomial", "constant")
ARRIVAL_FAMILIES = ("uniform01", "exponential", "gamma", "deterministic", "table")
SERVICE_FAMILIES = ("gamma", "exponential", "deterministic")

DEFAULT_LADDER = tuple(2 ** k for k in range(6, 14))
KMT_LADDER = tuple(2 ** k for k in range(4, 13))

# Metrics recorded and acceptance band of the fitted slope, per kind.
KIND_METRICS = {
    "couple-arrival": ("arrival",),
    "couple-workload": ("workload", "remaining-workload"),
    "couple-remaining-workload": ("remaining-workload",),
    "couple-queue": ("queue",),
    "couple-timechange": ("timechange",),
    "kmt-empirical": ("kmt-empirical",),
    "validate-bounds": (),
    "simulate-only": (),
}
KIND_BANDS = {
    "couple-arrival": (0.15, 0.35),
    "couple-workload": (0.15, 0.35),
    "couple-remaining-workload": (0.15, 0.35),
    "couple-queue": (0.12, 0.40),
    "couple-timechange": (-0.35, -0.15),
}
KIND_CORRECTIONS = {
    "couple-queue": ("sqrt-log-n", "sqrt-log-cn"),
    "kmt-empirical": ("log-n",),
}


@dataclass(frozen=True)
class CnRule:
    """Server effort c_n as a function of n."""

    rule: str = "critical"
    exponent: float = 1.0
    scale: float = 1.0

    def __call__(self, n: int, mu: float, p: float) -> float:
        if self.rule == "critical":
            return self.scale * n * mu * p
        if self.rule == "polynomial":
            return self.scale * n ** self.exponent
        return self.scale


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "couple-arrival"
    ladder: tuple[int, ...] = DEFAULT_LADDER
    replications: int = 200
    p: float = 0.7
    arrival: DistributionSpec = field(default_factory=dist.uniform01)
    perturbation: DistributionSpec | None = None
    perturbation_coefficient: float = 0.0
    service: DistributionSpec = field(default_factory=lambda: dist.gamma(2.0, 1.0))
    c_rule: CnRule = field(default_factory=CnRule)
    seed: int = 20240101
    delta: float = 1 / 4096
    out: Path = Path("results")
    jobs: int = 1
    corrections: tuple[str, ...] = ("sqrt-log-n",)
    slope_low: float = 0.15
    slope_high: float = 0.35
    metrics: tuple[str, ...] = ("arrival",)
    # Direct iid draws behind the walk and DKW bound checks.
    bound_n: int = 100
    bound_replications: int = 10000

    def arrival_for(self, n: int) -> DistributionSpec:
        """G, or the mixture G^(n) when a perturbation is configured."""
        if self.perturbation is None:
            return self.arrival
        return dist.mixture(self.arrival, self.perturbation, self.perturbation_coefficient, n)

    def c_n(self, n: int) -> float:
        return self.c_rule(n, self.service.mean, self.p)


def default_config(kind: str) -> ExperimentConfig:
    """Settings of the acceptance run for this kind."""
    if kind not in KINDS:
        raise ValidationError(f"Invalid kind: {kind}")
    low, high = KIND_BANDS.get(kind, (0.15, 0.35))
    cfg = ExperimentConfig(
        kind=kind,
        metrics=KIND_METRICS[kind],
        corrections=KIND_CORRECTIONS.get(kind, ("sqrt-log-n",)),
        slope_low=low,
        slope_high=high,
    )
    if kind == "kmt-empirical":
        cfg = replace(cfg, ladder=KMT_LADDER)
    if kind == "couple-arrival":
        cfg = replace(cfg, service=dist.deterministic(1.0))
    if kind in ("validate-bounds", "simulate-only"):
        cfg = replace(cfg, ladder=(64, 256, 1024), replications=100)
    return cfg


def spec_from_table(raw: dict, where: str, families: tuple[str, ...], base_dir: Path) -> DistributionSpec:
    """Build a DistributionSpec from a config table {family, params, table}."""
    if "family" not in raw:
        raise ValidationError(f"Missing required field: {where}.family")
    family = raw["family"]
    if family not in families:
        raise ValidationError(f"Invalid {where}.family: {family}")
    if family == "table":
        if "table" not in raw:
            raise ValidationError(f"Missing required field: {where}.table")
        return dist.load_cdf_table(base_dir / raw["table"])
    params = raw.get("params", [])
    if not isinstance(params, list) or not all(isinstance(v, int | float) for v in params):
        raise ValidationError(f"{where}.params must be a list of numbers")
    return DistributionSpec(family, tuple(float(v) for v in params))


def validate_config(raw: dict) -> None:
    """Check required fields and invariants. Raises ValidationError if invalid."""
    if "kind" not in raw:
        raise ValidationError("Missing required field: kind")
    if raw["kind"] not in KINDS:
        raise ValidationError(f"Invalid kind: {raw['kind']}")

    ladder = raw.get("ladder")
    if ladder is not None:
        if not isinstance(ladder, list) or not ladder or not all(isinstance(n, int) for n in ladder):
            raise ValidationError("ladder must be a non-empty list of integers")
        if min(ladder) < 2:
            raise ValidationError(f"ladder entries must be >= 2, got {min(ladder)}")
        if any(b <= a for a, b in zip(ladder, ladder[1:], strict=False)):
            raise ValidationError("ladder must be strictly increasing")

    reps = raw.get("replications", 1)
    if not isinstance(reps, int) or reps < 1:
        raise ValidationError(f"replications must be an integer >= 1, got {reps}")

    p = raw.get("p", 0.7)
    if not isinstance(p, int | float) or not 0 < p <= 1:
        raise ValidationError(f"p must lie in (0, 1], got {p}")

    for name in ("arrival", "service"):
        if name in raw and not isinstance(raw[name], dict):
            raise ValidationError(f"{name} must be a table")
    mixture = raw.get("arrival", {}).get("mixture")
    if mixture is not None:
        if "coefficient" not in mixture:
            raise ValidationError("Missing required field: arrival.mixture.coefficient")
        if not isinstance(mixture["coefficient"], int | float) or mixture["coefficient"] < 0:
            raise ValidationError("arrival.mixture.coefficient must be a non-negative number")

    rule = raw.get("c_n", {})
    if not isinstance(rule, dict):
        raise ValidationError("c_n must be a table")
    if rule.get("rule", "critical") not in C_RULES:
        raise ValidationError(f"Invalid c_n.rule: {rule.get('rule')}")
    if rule.get("scale", 1.0) <= 0:
        raise ValidationError("c_n.scale must be positive")

    for corr in raw.get("corrections", []):
        if corr not in CORRECTIONS:
            raise ValidationError(f"Invalid correction: {corr}")
    for metric in raw.get("metrics", []):
        if metric not in METRICS:
            raise ValidationError(f"Invalid metric: {metric}")

    for key, low in (("bound_n", 2), ("bound_replications", 1)):
        value = raw.get(key, low)
        if not isinstance(value, int) or value < low:
            raise ValidationError(f"{key} must be an integer >= {low}, got {value}")

    delta = raw.get("delta", 1 / 4096)
    if not isinstance(delta, int | float) or not 0 < delta <= 1:
        raise ValidationError(f"delta must lie in (0, 1], got {delta}")

    jobs = raw.get("jobs", 1)
    if not isinstance(jobs, int) or jobs < 1:
        raise ValidationError(f"jobs must be an integer >= 1, got {jobs}")

    if raw.get("slope_low", -math.inf) > raw.get("slope_high", math.inf):
        raise ValidationError("slope_low must not exceed slope_high")


def config_from_dict(raw: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    """Validate raw settings and merge them over the kind's defaults."""
    validate_config(raw)
    cfg = default_config(raw["kind"])
    changes: dict = {}
    if "ladder" in raw:
        changes["ladder"] = tuple(raw["ladder"])
    for key in ("replications", "seed", "jobs", "bound_n", "bound_replications"):
        if key in raw:
            changes[key] = int(raw[key])
    for key in ("p", "delta", "slope_low", "slope_high"):
        if key in raw:
            changes[key] = float(raw[key])
    if "out" in raw:
        changes["out"] = Path(raw["out"])
    if "corrections" in raw:
        changes["corrections"] = tuple(raw["corrections"])
    if "metrics" in raw:
        changes["metrics"] = tuple(raw["metrics"])
    if "arrival" in raw:
        changes["arrival"] = spec_from_table(raw["arrival"], "arrival", ARRIVAL_FAMILIES, base_dir)
        mixture = raw["arrival"].get("mixture")
        if mixture is not None:
            changes["perturbation"] = spec_from_table(mixture, "arrival.mixture",
                                                      ARRIVAL_FAMILIES, base_dir)
            changes["perturbation_coefficient"] = float(mixture["coefficient"])
    if "service" in raw:
        changes["service"] = spec_from_table(raw["service"], "service", SERVICE_FAMILIES, base_dir)
    if "c_n" in raw:
        rule = raw["c_n"]
        changes["c_rule"] = CnRule(rule.get("rule", "critical"), float(rule.get("exponent", 1.0)),
                                   float(rule.get("scale", 1.0)))
    return replace(cfg, **changes)


def load_config(path: Path) -> ExperimentConfig:
    """Parse and validate a TOML experiment file."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"Config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as e:
        raise ValidationError(f"Cannot parse {path}: {e}") from e
    return config_from_dict(raw, path.parent)
