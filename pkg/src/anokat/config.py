"""Run configuration: a frozen dataclass, JSON loading with located errors."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from anokat.surface import SurfaceTag

__all__ = ["RunConfig", "ConfigError", "load_config"]


class ConfigError(ValueError):
    """Invalid configuration; message carries file position when known."""


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs besides the surface/stage count themselves.

    The grid sizes trade certification tightness against runtime; the
    defaults match the scales the acceptance checks use.  ``w_max`` caps the
    doubling search for the commuting-multiple parameter; a stage that
    cannot satisfy its conditions below the cap is rejected rather than
    silently weakened.
    """

    surface: str = "cylinder"
    stages: int = 3
    seed: int = 0
    outdir: str = "anokat-out"   # default output location; not hashed

    # discretization of the verification measures
    mu_atoms: int = 512          # atoms per longitude-circle sample
    mu_atoms_max: int = 8192     # ceiling for the stretch-adaptive count
    atoms_per_stretch: int = 16  # atoms per unit of conjugacy stretching
    leb_theta: int = 40          # uniform reference grid, longitude count
    leb_y: int = 40              # uniform reference grid, height count
    circle_atoms: int = 64       # atoms for the end-circle references
    y_grid: int = 16             # base height grid for the accuracy estimate
    y_cluster_depth: int = 8     # extra heights 1 - 2^-k near the ends

    # stage condition sampling
    c0_samples: int = 10816      # points for the sampled closeness sup
                                 # (104^2: >= 10^4 still used after the
                                 # collar and seam exclusions)
    c0_jitter_tries: int = 8     # re-draws for a seam-straddling sample
    max_straddle_fraction: float = 0.25
    orbit_basepoints: int = 24   # basepoints for the orbit-closeness check
    orbit_check_count: int = 64  # sampled iterate counts k <= q_n
    orbit_eval_cap: int = 8192   # max iterate evaluations per basepoint
    merg_theta: int = 6          # basepoint grid for the minimality defect
    merg_y: int = 5
    orbit_atoms: int = 2048      # orbit proxy size cap
    m_max: int = 1 << 20         # rotation-offset multiplier doubling cap

    # solver budgets
    max_entries: int = 4_000_000
    slack_entries: int = 12_000_000  # one-off proxy-slack solves
    entropic_fallback: bool = False  # entropic upper bound past the cap

    def __post_init__(self) -> None:
        SurfaceTag.parse(self.surface)  # raises on junk
        positive = ["mu_atoms", "mu_atoms_max", "atoms_per_stretch",
                    "leb_theta", "leb_y", "circle_atoms",
                    "y_grid", "y_cluster_depth", "c0_samples",
                    "c0_jitter_tries", "orbit_basepoints",
                    "orbit_check_count", "orbit_eval_cap", "merg_theta",
                    "merg_y", "orbit_atoms", "m_max", "max_entries",
                    "slack_entries"]
        for name in positive:
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.stages < 0:
            raise ConfigError(f"stages must be >= 0, got {self.stages}")
        if not isinstance(self.seed, int):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        if not isinstance(self.outdir, str) or not self.outdir:
            raise ConfigError("outdir must be a non-empty string")
        if not isinstance(self.entropic_fallback, bool):
            raise ConfigError("entropic_fallback must be a boolean")
        if not 0.0 <= self.max_straddle_fraction <= 1.0:
            raise ConfigError("max_straddle_fraction must lie in [0, 1]")
        if self.m_max & (self.m_max - 1):
            raise ConfigError(f"m_max must be a power of two, got {self.m_max}")
        hull_atoms = self.leb_theta * self.leb_y + 2 * self.circle_atoms
        need = max(self.mu_atoms, self.orbit_atoms) * hull_atoms
        if self.max_entries < need:
            raise ConfigError(
                f"max_entries={self.max_entries} is below the "
                f"{need} entries the hull searches need at these "
                f"resolutions (atoms x mixture size)")

    @property
    def tag(self) -> SurfaceTag:
        return SurfaceTag.parse(self.surface)

    def to_json_dict(self) -> dict:
        return asdict(self)

    def content_hash(self) -> str:
        # outdir is deployment plumbing: resuming into a different directory
        # must still produce the same hash-stamped ledger
        obj = {k: v for k, v in self.to_json_dict().items() if k != "outdir"}
        text = json.dumps(obj, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @classmethod
    def from_json_dict(cls, obj: dict) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError(f"config must be a JSON object, got {type(obj).__name__}")
        known = {f.name for f in fields(cls)}
        junk = sorted(set(obj) - known)
        if junk:
            raise ConfigError(f"unknown config keys: {', '.join(junk)}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> RunConfig:
    """Read a JSON config file; malformed JSON reports line and column."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: "
            f"{exc.msg}") from exc
    return RunConfig.from_json_dict(obj)
