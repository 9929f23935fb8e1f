"""Multi-site synthetic encounter data with a known generating posterior.

Each site draws concept statuses from its own per-concept P/N/M prior
(covariate shift). Labels follow

    p(y=1 | x, site) = sigmoid(w . x + u_site . x + b_site)

where ``w`` is shared by all sites, ``u_site`` is a site-specific nuisance
term scaled by ``nuisance_strength`` and ``b_site`` is solved by bisection
so the site's expected positive rate equals its prevalence target.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .data import Dataset, EncounterRecord, encode_statuses
from .errors import ConfigurationError

# Encounters (positives) per ER
SITE_COUNTS = (594, 483, 288, 251, 233, 229, 216, 215, 183, 165, 149, 121, 83)
SITE_POSITIVES = (135, 88, 58, 50, 38, 49, 67, 24, 57, 36, 45, 32, 29)

STUDY_START = dt.date(2020, 3, 16)
STUDY_END = dt.date(2021, 1, 31)

INTERCEPT_SAMPLES = 50_000


def site_prevalence() -> tuple[float, ...]:
    return tuple(p / n for p, n in zip(SITE_POSITIVES, SITE_COUNTS))


@dataclass
class SyntheticConfig:
    n_sites: int = 13
    counts: Sequence[int] = SITE_COUNTS
    vocab_size: int = 60
    prevalence: Sequence[float] = field(default_factory=site_prevalence)
    # 0 = identical site priors; 1 = each site's priors drawn independently
    shift: float = 0.5
    nuisance_strength: float = 0.0
    signal_strength: float = 1.0
    informative_fraction: float = 0.5
    # Dirichlet concentration of the P/N/M priors; lower = more peaked
    prior_concentration: float = 1.0
    seed: int = 0
    site_ids: Sequence[str] | None = None
    start_date: dt.date = STUDY_START
    end_date: dt.date = STUDY_END
    # explicit overrides (otherwise drawn from the knobs above)
    concept_weights: np.ndarray | None = None
    site_status_priors: np.ndarray | None = None

    def __post_init__(self):
        self.counts = tuple(int(c) for c in self.counts)
        self.prevalence = tuple(float(p) for p in self.prevalence)
        if self.n_sites < 2:
            raise ConfigurationError("n_sites must be at least 2")
        if len(self.counts) != self.n_sites:
            raise ConfigurationError(f"counts has {len(self.counts)} entries for {self.n_sites} sites")
        if len(self.prevalence) != self.n_sites:
            raise ConfigurationError(f"prevalence has {len(self.prevalence)} entries for {self.n_sites} sites")
        if any(c < 1 for c in self.counts):
            raise ConfigurationError("counts must be positive")
        for k, p in enumerate(self.prevalence):
            if not 0.0 < p < 1.0:
                raise ConfigurationError(f"prevalence[{k}] = {p} is unsatisfiable; must lie in (0, 1)")
        if self.vocab_size < 1:
            raise ConfigurationError("vocab_size must be positive")
        if not 0.0 <= self.shift <= 1.0:
            raise ConfigurationError("shift must lie in [0, 1]")
        if self.nuisance_strength < 0:
            raise ConfigurationError("nuisance_strength must be >= 0")
        if not 0.0 < self.informative_fraction <= 1.0:
            raise ConfigurationError("informative_fraction must lie in (0, 1]")
        if self.prior_concentration <= 0:
            raise ConfigurationError("prior_concentration must be > 0")
        if self.site_ids is None:
            self.site_ids = tuple(f"ER{k + 1}" for k in range(self.n_sites))
        self.site_ids = tuple(self.site_ids)
        if len(self.site_ids) != self.n_sites or len(set(self.site_ids)) != self.n_sites:
            raise ConfigurationError("site_ids must be n_sites distinct names")
        if self.end_date < self.start_date:
            raise ConfigurationError("end_date precedes start_date")
        if self.concept_weights is not None:
            self.concept_weights = np.asarray(self.concept_weights, dtype=np.float64)
            if self.concept_weights.shape != (3 * self.vocab_size,):
                raise ConfigurationError("concept_weights must have length 3 * vocab_size")
        if self.site_status_priors is not None:
            pri = np.asarray(self.site_status_priors, dtype=np.float64)
            if pri.shape != (self.n_sites, self.vocab_size, 3):
                raise ConfigurationError("site_status_priors must have shape (n_sites, vocab_size, 3)")
            if np.any(pri < 0) or not np.allclose(pri.sum(axis=2), 1.0):
                raise ConfigurationError("site_status_priors rows must be probability vectors")
            self.site_status_priors = pri

    def to_dict(self) -> dict:
        out = asdict(self)
        out["start_date"] = self.start_date.isoformat()
        out["end_date"] = self.end_date.isoformat()
        for key in ("counts", "prevalence", "site_ids"):
            out[key] = list(out[key])
        for key in ("concept_weights", "site_status_priors"):
            if out[key] is not None:
                out[key] = np.asarray(out[key]).tolist()
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "SyntheticConfig":
        obj = dict(obj)
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown synthetic config field(s): {sorted(unknown)}")
        for key in ("start_date", "end_date"):
            if isinstance(obj.get(key), str):
                obj[key] = dt.date.fromisoformat(obj[key])
        if "counts" in obj and "n_sites" not in obj:
            obj["n_sites"] = len(obj["counts"])
        n = obj.get("n_sites", cls.n_sites)
        if "counts" not in obj and n != len(SITE_COUNTS):
            raise ConfigurationError("counts must be given when n_sites differs from 13")
        if "prevalence" not in obj and n != len(SITE_COUNTS):
            raise ConfigurationError("prevalence must be given when n_sites differs from 13")
        if isinstance(obj.get("prevalence"), (int, float)):
            obj["prevalence"] = [float(obj["prevalence"])] * n
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None


@dataclass
class GroundTruth:
    site_ids: tuple[str, ...]
    vocabulary: tuple[str, ...]
    concept_weights: np.ndarray  # (3V,)
    nuisance_weights: np.ndarray  # (S, 3V)
    intercepts: np.ndarray  # (S,)
    site_status_priors: np.ndarray  # (S, V, 3)

    def site_index(self, er_id: str) -> int:
        try:
            return self.site_ids.index(er_id)
        except ValueError:
            raise ConfigurationError(f"site {er_id!r} is not part of this ground truth") from None

    def logits(self, x: np.ndarray, site_idx: np.ndarray) -> np.ndarray:
        site_idx = np.asarray(site_idx)
        return (
            x @ self.concept_weights
            + np.einsum("ij,ij->i", x, self.nuisance_weights[site_idx])
            + self.intercepts[site_idx]
        )

    def posterior(self, x: np.ndarray, site_idx: np.ndarray) -> np.ndarray:
        return expit(self.logits(x, site_idx))

    def to_dict(self) -> dict:
        return {
            "site_ids": list(self.site_ids),
            "vocabulary": list(self.vocabulary),
            "concept_weights": [repr(float(v)) for v in self.concept_weights],
            "nuisance_weights": [[repr(float(v)) for v in row] for row in self.nuisance_weights],
            "intercepts": [repr(float(v)) for v in self.intercepts],
            "site_status_priors": [
                [[repr(float(v)) for v in triple] for triple in site] for site in self.site_status_priors
            ],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "GroundTruth":
        arr = lambda v: np.array(v, dtype=np.float64)  # noqa: E731
        return cls(
            tuple(obj["site_ids"]),
            tuple(obj["vocabulary"]),
            arr(obj["concept_weights"]),
            arr(obj["nuisance_weights"]),
            arr(obj["intercepts"]),
            arr(obj["site_status_priors"]),
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "GroundTruth":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _site_rng(seed: int, site: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, site, stream]))


def _sample_codes(rng: np.random.Generator, priors: np.ndarray, n: int) -> np.ndarray:
    """Draw an (n, V) matrix of status codes from per-concept priors (V, 3)."""
    cdf = np.cumsum(priors, axis=1)
    u = rng.random((n, priors.shape[0]))
    codes = (u[:, :, None] > cdf[None, :, :2]).sum(axis=2)
    return codes.astype(np.uint8)


def _solve_intercept(base_logits: np.ndarray, target: float) -> float:
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if expit(base_logits + mid).mean() < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    return 0.5 * (lo + hi)


def build_ground_truth(cfg: SyntheticConfig) -> GroundTruth:
    V, S = cfg.vocab_size, cfg.n_sites
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1_000_003]))
    vocabulary = tuple(f"C{j + 1:04d}" for j in range(V))

    if cfg.site_status_priors is not None:
        priors = cfg.site_status_priors
    else:
        base = rng.dirichlet(np.full(3, cfg.prior_concentration), size=V)
        priors = np.empty((S, V, 3))
        for s in range(S):
            own = _site_rng(cfg.seed, s, 2).dirichlet(np.full(3, cfg.prior_concentration), size=V)
            priors[s] = (1.0 - cfg.shift) * base + cfg.shift * own

    if cfg.concept_weights is not None:
        w = cfg.concept_weights
    else:
        informative = rng.random(V) < cfg.informative_fraction
        w = cfg.signal_strength * rng.normal(size=(V, 3)) * informative[:, None]
        w = w.ravel()

    nuisance = np.zeros((S, 3 * V))
    if cfg.nuisance_strength > 0:
        for s in range(S):
            nuisance[s] = cfg.nuisance_strength * _site_rng(cfg.seed, s, 3).normal(size=3 * V)

    intercepts = np.empty(S)
    for s in range(S):
        # common random numbers: sites with equal priors, weights and prevalence get equal intercepts
        crn = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))
        codes = _sample_codes(crn, priors[s], INTERCEPT_SAMPLES)
        x = encode_statuses(codes)
        intercepts[s] = _solve_intercept(x @ (w + nuisance[s]), cfg.prevalence[s])

    return GroundTruth(tuple(cfg.site_ids), vocabulary, w, nuisance, intercepts, priors)


def generate(cfg: SyntheticConfig) -> tuple[Dataset, GroundTruth]:
    """Sample a dataset; a pure function of ``cfg`` (including its seed)."""
    gt = build_ground_truth(cfg)
    span = (cfg.end_date - cfg.start_date).days + 1
    records = []
    for s, er_id in enumerate(cfg.site_ids):
        rng = _site_rng(cfg.seed, s, 0)
        n = cfg.counts[s]
        codes = _sample_codes(rng, gt.site_status_priors[s], n)
        p = gt.posterior(encode_statuses(codes), np.full(n, s))
        labels = (rng.random(n) < p).astype(int)
        days = np.sort(rng.integers(0, span, size=n))
        width = len(str(n))
        for i in range(n):
            records.append(
                EncounterRecord(
                    f"{er_id}-{i + 1:0{width}d}",
                    er_id,
                    cfg.start_date + dt.timedelta(days=int(days[i])),
                    codes[i],
                    int(labels[i]),
                )
            )
    return Dataset(gt.vocabulary, tuple(records), tuple(cfg.site_ids)), gt


def bayes_score(gt: GroundTruth, record: EncounterRecord) -> float:
    """Exact generating probability ``p(y=1 | x, site)`` for one record."""
    x = encode_statuses(record.statuses[None, :])
    return float(gt.posterior(x, np.array([gt.site_index(record.er_id)]))[0])


def bayes_scores(gt: GroundTruth, ds: Dataset) -> np.ndarray:
    """Vectorized :func:`bayes_score` over a whole dataset."""
    if not len(ds):
        return np.zeros(0)
    x = encode_statuses(ds.status_matrix())
    idx = np.array([gt.site_index(s) for s in ds.er_ids()])
    return gt.posterior(x, idx)


def prior_divergence(gt: GroundTruth) -> float:
    """Mean pairwise total-variation distance between site priors, averaged over concepts."""
    pri = gt.site_status_priors
    S = len(pri)
    tv = [
        0.5 * np.abs(pri[a] - pri[b]).sum(axis=1).mean()
        for a in range(S)
        for b in range(a + 1, S)
    ]
    return float(np.mean(tv))
