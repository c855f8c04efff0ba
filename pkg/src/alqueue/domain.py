"""Synthetic design space standing in for linker chemistry.

A candidate is a latent vector ``z`` in R^k. Its embedding is ``tanh(A z + b)``
(38 features), its fingerprint is the set of 64 random hyperplanes the embedding
lies on the positive side of, and its expensive oracle score is a noisy scaled
squared distance to a hidden optimum ``z_star``. The generator is a diagonal
Gaussian mixture over latents that can be refit on elite results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import rng as rngmod
from .core import Candidate, Dataset, Origin, ScoredRecord, dedup_key, insert_unique, mask_to_bits, top_fraction

EMBED_DIM = 38
N_BITS = 64
VARIANCE_FLOOR = 1e-3
VALID_LATENT_MAX = 6.0
TARGET_STABLE_RATE = 0.05
TARGET_MEAN_SA = 0.1
CALIBRATION_SAMPLES = 10_000
_BIT_WEIGHTS = (np.uint64(1) << np.arange(N_BITS, dtype=np.uint64))


class CalibrationError(RuntimeError):
    pass


@dataclass
class Generator:
    weights: np.ndarray   # (K,)
    means: np.ndarray     # (K, k)
    variances: np.ndarray  # (K, k)
    version: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if self.means.shape != self.variances.shape or self.means.shape[0] != self.weights.shape[0]:
            raise ValueError("inconsistent mixture shapes")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(self.variances < VARIANCE_FLOOR):
            raise ValueError(f"component variances must be >= {VARIANCE_FLOOR}")

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def k(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def sample_latents(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.K, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.k))
        return self.means[comp] + np.sqrt(self.variances[comp]) * noise


@dataclass
class LatencyModel:
    """Oracle wall-latency in simulated seconds: constant or log-normal."""
    kind: str = "lognormal"
    median: float = 300.0
    sigma: float = 0.3

    def draw(self, rng: np.random.Generator) -> float:
        if self.kind == "constant":
            return float(self.median)
        if self.kind == "lognormal":
            return float(self.median * math.exp(self.sigma * rng.standard_normal()))
        raise ValueError(f"unknown latency model {self.kind!r}")


@dataclass
class WorldSpec:
    seed: int
    k: int
    z_star: np.ndarray
    scale: float
    noise_sd: float
    sa_direction: np.ndarray
    init_generator: Generator
    reference_mixture: Generator
    feature_map_seed: int
    fingerprint_seed: int
    calibration: dict = field(default_factory=dict)
    reference_set: Dataset | None = None
    A: np.ndarray = field(init=False, repr=False)
    b: np.ndarray = field(init=False, repr=False)
    H: np.ndarray = field(init=False, repr=False)
    _ref_masks: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.z_star = np.asarray(self.z_star, dtype=np.float64)
        self.sa_direction = np.asarray(self.sa_direction, dtype=np.float64)
        self.A, self.b = feature_map(self.feature_map_seed, self.k)
        self.H = hyperplanes(self.fingerprint_seed)

    # --- cheap featurization -------------------------------------------

    def featurize(self, latent) -> np.ndarray:
        latent = np.asarray(latent, dtype=np.float64)
        if latent.shape != (self.k,):
            raise ValueError(f"latent must have length {self.k}, got shape {latent.shape}")
        return np.tanh(self.A @ latent + self.b)

    def featurize_batch(self, latents: np.ndarray) -> np.ndarray:
        latents = np.asarray(latents, dtype=np.float64)
        if latents.ndim != 2 or latents.shape[1] != self.k:
            raise ValueError(f"latents must be (n, {self.k})")
        return np.tanh(latents @ self.A.T + self.b)

    def fingerprint_of(self, embedding) -> frozenset:
        return mask_to_bits(int(self.fingerprint_masks(np.atleast_2d(embedding))[0]))

    def fingerprint_masks(self, embeddings: np.ndarray) -> np.ndarray:
        on = (embeddings @ self.H.T) > 0
        return (on.astype(np.uint64) * _BIT_WEIGHTS).sum(axis=1, dtype=np.uint64)

    def build_candidates(self, ids, origins, latents, generator_version: int = 0) -> list[Candidate]:
        latents = np.asarray(latents, dtype=np.float64).reshape(len(ids), self.k)
        emb = self.featurize_batch(latents)
        masks = self.fingerprint_masks(emb)
        if isinstance(origins, Origin):
            origins = [origins] * len(ids)
        return [
            Candidate(int(i), latents[j].copy(), emb[j].copy(), mask_to_bits(int(masks[j])), o, generator_version)
            for j, (i, o) in enumerate(zip(ids, origins))
        ]

    # --- scores ------------------------------------------------------------

    def sa_score(self, c: Candidate) -> float:
        return float(_logistic(float(self.sa_direction @ c.embedding)))

    def sa_scores(self, embeddings: np.ndarray) -> np.ndarray:
        return _logistic(embeddings @ self.sa_direction)

    def reference_masks(self) -> np.ndarray:
        if self._ref_masks is None:
            if self.reference_set is None or len(self.reference_set) == 0:
                raise ValueError("world has no reference set")
            self._ref_masks = self.reference_set.masks()
        return self._ref_masks

    def novelty(self, c: Candidate) -> float:
        return novelty_score(c, self.reference_masks())

    def novelty_batch(self, masks: np.ndarray) -> np.ndarray:
        return min_tanimoto_distance(masks, self.reference_masks())

    def oracle_strain(self, c: Candidate) -> float:
        return oracle_strain(c, self)

    def score_candidates(self, cands: list[Candidate]) -> list[ScoredRecord]:
        """Wrap candidates with their cheap scores (no oracle call)."""
        if not cands:
            return []
        emb = np.stack([c.embedding for c in cands])
        masks = np.array([c.mask for c in cands], dtype=np.uint64)
        sa = self.sa_scores(emb)
        st = self.novelty_batch(masks)
        return [ScoredRecord(c, float(a), float(t)) for c, a, t in zip(cands, sa, st)]


def _logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def feature_map(seed: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    g = rngmod.stream(seed, rngmod.WORLD_MAP)
    A = g.normal(0.0, 0.45, size=(EMBED_DIM, k))
    b = g.normal(0.0, 1.0, size=EMBED_DIM)
    return A, b


def hyperplanes(seed: int) -> np.ndarray:
    return rngmod.stream(seed, rngmod.WORLD_FINGERPRINT).standard_normal((N_BITS, EMBED_DIM))


# --- similarity ----------------------------------------------------------

def tanimoto(a, b) -> float:
    """Tanimoto distance between two bit-sets; two empty sets are identical (0)."""
    a, b = set(a), set(b)
    inter = len(a & b)
    union = len(a) + len(b) - inter
    if union == 0:
        return 0.0
    return 1.0 - inter / union


def tanimoto_masks(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    inter = np.bitwise_count(a & b).astype(np.int64)
    union = np.bitwise_count(a | b).astype(np.int64)
    with np.errstate(invalid="ignore", divide="ignore"):
        d = 1.0 - inter / union
    return np.where(union == 0, 0.0, d)


def min_tanimoto_distance(masks: np.ndarray, ref_masks: np.ndarray, chunk: int = 256) -> np.ndarray:
    masks = np.asarray(masks, dtype=np.uint64)
    ref = np.asarray(ref_masks, dtype=np.uint64)
    if ref.size == 0:
        raise ValueError("empty reference set")
    out = np.empty(masks.shape[0])
    for s in range(0, masks.shape[0], chunk):
        block = masks[s:s + chunk, None]
        out[s:s + chunk] = tanimoto_masks(block, ref[None, :]).min(axis=1)
    return out


def novelty_score(c: Candidate, reference) -> float:
    """Smallest Tanimoto distance from ``c`` to any reference fingerprint."""
    ref = reference.masks() if isinstance(reference, Dataset) else np.asarray(reference, dtype=np.uint64)
    if ref.size == 0:
        raise ValueError("empty reference set")
    return float(tanimoto_masks(np.uint64(c.mask), ref).min())


# --- oracle & validity ---------------------------------------------------

def oracle_noise(c: Candidate) -> float:
    return float(rngmod.stream(dedup_key(c), rngmod.ORACLE_NOISE).standard_normal())


def oracle_strain(c: Candidate, world: WorldSpec) -> float:
    dist2 = float(np.sum((np.asarray(c.latent) - world.z_star) ** 2))
    return dist2 / world.scale * math.exp(world.noise_sd * oracle_noise(c))


def validity_check(c: Candidate) -> bool:
    return bool(np.all(np.abs(c.latent) <= VALID_LATENT_MAX))


# --- generator -----------------------------------------------------------

def sample_candidates(g: Generator, n: int, rng: np.random.Generator, world: WorldSpec,
                      start_id: int) -> list[Candidate]:
    if n < 1:
        raise ValueError("n must be >= 1")
    latents = g.sample_latents(n, rng)
    return world.build_candidates(range(start_id, start_id + n), Origin.GENERATED, latents, g.version)


def kmeans(x: np.ndarray, K: int, rng: np.random.Generator, iters: int = 25) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm from a k-means++ start; returns (centroids, labels)."""
    n = x.shape[0]
    centers = np.empty((K, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, K):
        tot = d2.sum()
        i = rng.choice(n, p=d2 / tot) if tot > 0 else rng.integers(n)
        centers[j] = x[i]
        d2 = np.minimum(d2, np.sum((x - centers[j]) ** 2, axis=1))
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = dist.argmin(axis=1)
        for j in range(K):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                # re-seed an empty cluster at the point worst served by its centroid
                far = int(dist[np.arange(n), labels].argmax())
                centers[j] = x[far]
                labels[far] = j
    return centers, labels


def fine_tune(g: Generator, elite: Dataset, rng: np.random.Generator, eta: float = 0.5,
              variance_floor: float = VARIANCE_FLOOR) -> Generator:
    """Blend the mixture toward a k-means refit of the elite latents."""
    if len(elite) < g.K:
        raise ValueError(f"fine_tune needs at least {g.K} elite records, got {len(elite)}")
    if not 0 <= eta <= 1:
        raise ValueError("eta must be in [0, 1]")
    x = elite.latents()
    centers, labels = kmeans(x, g.K, rng)
    sizes = np.bincount(labels, minlength=g.K).astype(np.float64)
    est_var = np.empty_like(centers)
    for j in range(g.K):
        members = x[labels == j]
        if len(members) > 1:
            est_var[j] = members.var(axis=0, ddof=1)
        else:
            est_var[j] = variance_floor
    est_var = np.maximum(est_var, variance_floor)
    # pair each refit cluster with the closest existing component
    cost = ((g.means[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    rows, cols = linear_sum_assignment(cost)
    order = cols[np.argsort(rows)]
    est_w = sizes[order] / sizes.sum()
    means = (1 - eta) * g.means + eta * centers[order]
    variances = np.maximum((1 - eta) * g.variances + eta * est_var[order], variance_floor)
    weights = (1 - eta) * g.weights + eta * est_w
    if np.any(weights <= 0):
        weights = np.maximum(weights, 1e-12)
    weights = weights / weights.sum()
    return Generator(weights, means, variances, g.version + 1)


# --- world construction --------------------------------------------------

def _random_unit(g: np.random.Generator, k: int) -> np.ndarray:
    v = g.standard_normal(k)
    return v / np.linalg.norm(v)


def _layout(seed: int, k: int, K: int) -> tuple[np.ndarray, Generator, Generator]:
    g = rngmod.stream(seed, rngmod.WORLD_LAYOUT)
    z_star = g.normal(0.0, 0.5, size=k)
    # generator components sit 2-4 units from the optimum
    means = np.stack([z_star + g.uniform(2.0, 4.0) * _random_unit(g, k) for _ in range(K)])
    variances = np.full((K, k), 0.6 ** 2)
    gen = Generator(np.full(K, 1.0 / K), means, variances, 0)
    # reference mixture: broader, partly overlapping both the optimum and the generator
    k_ref = 4
    ref_means = np.stack([z_star + g.uniform(0.5, 3.0) * _random_unit(g, k) for _ in range(k_ref)])
    ref = Generator(np.full(k_ref, 1.0 / k_ref), ref_means, np.full((k_ref, k), 0.9 ** 2), 0)
    return z_star, gen, ref


def _calibrate_sa(world: WorldSpec, emb: np.ndarray, g: np.random.Generator) -> tuple[np.ndarray, float, float]:
    m = emb.mean(axis=0)
    m_hat = m / np.linalg.norm(m)
    r = g.standard_normal(EMBED_DIM)
    r -= (r @ m_hat) * m_hat
    r /= np.linalg.norm(r)

    def direction(theta):
        return math.cos(theta) * (-m_hat) + math.sin(theta) * r

    def mean_sa(theta):
        return float(_logistic(emb @ direction(theta)).mean())

    lo, hi = 0.0, math.pi
    if mean_sa(lo) > TARGET_MEAN_SA:
        raise CalibrationError(f"SA calibration: minimum reachable mean {mean_sa(lo):.3f} > {TARGET_MEAN_SA}")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if mean_sa(mid) < TARGET_MEAN_SA:
            lo = mid
        else:
            hi = mid
    theta = 0.5 * (lo + hi)
    return direction(theta), theta, mean_sa(theta)


def create_world(seed: int, k: int = 8, K: int = 4, noise_sd: float = 0.05) -> WorldSpec:
    """Lay out a world and calibrate strain scale and SA direction by Monte-Carlo."""
    z_star, gen, ref = _layout(seed, k, K)
    cal = rngmod.stream(seed, rngmod.WORLD_CALIBRATION)
    world = WorldSpec(seed=seed, k=k, z_star=z_star, scale=1.0, noise_sd=noise_sd,
                      sa_direction=np.zeros(EMBED_DIM), init_generator=gen, reference_mixture=ref,
                      feature_map_seed=seed, fingerprint_seed=seed)

    fit = world.build_candidates(range(CALIBRATION_SAMPLES), Origin.GENERATED,
                                 gen.sample_latents(CALIBRATION_SAMPLES, cal))
    raw = np.array([oracle_strain(c, world) for c in fit])  # scale == 1
    # stable iff raw / scale < t  <=>  scale > raw / t; put the target quantile on the boundary
    world.scale = float(np.quantile(raw, TARGET_STABLE_RATE)) / 0.25

    check = world.build_candidates(range(CALIBRATION_SAMPLES), Origin.GENERATED,
                                   gen.sample_latents(CALIBRATION_SAMPLES, cal))
    rate = float(np.mean([oracle_strain(c, world) < 0.25 for c in check]))
    if not 0.04 <= rate <= 0.06:
        raise CalibrationError(f"stable-rate calibration failed: held-out rate {rate:.4f} outside [0.04, 0.06]")
    invalid = float(np.mean([not validity_check(c) for c in check]))

    emb = np.stack([c.embedding for c in fit])
    direction, theta, mean_sa = _calibrate_sa(world, emb, cal)
    world.sa_direction = direction
    world.calibration = {
        "stable_rate_fit": float(np.mean(raw / world.scale < 0.25)),
        "stable_rate_check": rate,
        "invalid_rate": invalid,
        "sa_theta": theta,
        "mean_sa": mean_sa,
    }
    return world


def labelled_records(world: WorldSpec, mixture: Generator, ids, origin: Origin,
                     rng: np.random.Generator) -> list[ScoredRecord]:
    cands = world.build_candidates(ids, origin, mixture.sample_latents(len(ids), rng))
    recs = world.score_candidates(cands) if world.reference_set is not None else [
        ScoredRecord(c, float(world.sa_scores(c.embedding[None])[0]), 0.0) for c in cands]
    for r in recs:
        r.record_strain(oracle_strain(r.candidate, world))
    return recs


def offline_campaign(world: WorldSpec, rng: np.random.Generator, start_id: int, stages: int = 10,
                     per_stage: int = 500, frac: float = 0.5) -> list[ScoredRecord]:
    """Labelled output of a past generate/fine-tune campaign.

    Each stage draws ``per_stage`` candidates from the current generator, labels
    them, and fine-tunes on the best ``frac`` of that stage before the next one.
    """
    g = world.init_generator
    out: list[ScoredRecord] = []
    for s in range(stages):
        ids = range(start_id + s * per_stage, start_id + (s + 1) * per_stage)
        recs = labelled_records(world, g, ids, Origin.PRETRAINING, rng)
        out += recs
        g = fine_tune(g, top_fraction(Dataset(recs), frac), rng)
    return out


def build_datasets(world: WorldSpec, n_ref: int = 3000, n_holdout: int = 3000, n_pool_ref: int = 1000,
                   campaign_stages: int = 10, per_stage: int = 500) -> tuple[Dataset, Dataset, Dataset]:
    """Reference/pretraining set, holdout set and the offline reordering pool.

    Ids: reference ``[0, n_ref)``, holdout next, then the campaign records. The
    holdout is half reference-mixture, half initial-generator draws. The pool is
    the first ``n_pool_ref`` reference records plus a past campaign's output.
    """
    g = rngmod.stream(world.seed, rngmod.WORLD_DATASETS)
    ref_recs = labelled_records(world, world.reference_mixture, range(n_ref), Origin.REFERENCE, g)
    reference = Dataset(ref_recs)
    world.reference_set = reference
    world._ref_masks = None
    # reference members are their own nearest neighbour
    for r in reference:
        r.s_t = 0.0

    h1 = n_holdout // 2
    hold = labelled_records(world, world.reference_mixture, range(n_ref, n_ref + h1), Origin.HOLDOUT, g)
    hold += labelled_records(world, world.init_generator, range(n_ref + h1, n_ref + n_holdout), Origin.HOLDOUT, g)
    holdout = Dataset(r for r in hold if r.key not in reference)

    campaign = offline_campaign(world, g, n_ref + n_holdout, campaign_stages, per_stage)
    pool = Dataset(list(reference)[:n_pool_ref] + [r for r in campaign if r.key not in holdout])
    return reference, holdout, pool


# --- persistence -----------------------------------------------------------

def _vec(a) -> str:
    return " ".join(repr(float(x)) for x in np.ravel(a))


def write_world(world: WorldSpec, out_dir: str | Path) -> None:
    out = Path(out_dir)
    meta = {
        "prng": rngmod.PRNG_VERSION,
        "seed": world.seed,
        "k": world.k,
        "K": world.init_generator.K,
        "embed_dim": EMBED_DIM,
        "n_bits": N_BITS,
        "feature_map_seed": world.feature_map_seed,
        "fingerprint_seed": world.fingerprint_seed,
        "scale": repr(world.scale),
        "noise_sd": repr(world.noise_sd),
        "variance_floor": repr(VARIANCE_FLOOR),
        "z_star": _vec(world.z_star),
        "sa_direction": _vec(world.sa_direction),
    }
    meta.update({f"calibration.{k}": repr(v) for k, v in world.calibration.items()})
    (out / "world.meta").write_text("".join(f"{k} = {v}\n" for k, v in meta.items()))
    lines = ["mixture,component,weight," + ",".join(f"mean_{i}" for i in range(world.k)) + ","
             + ",".join(f"var_{i}" for i in range(world.k))]
    for name, mix in (("generator", world.init_generator), ("reference", world.reference_mixture)):
        for j in range(mix.K):
            vals = [repr(float(mix.weights[j]))] + [repr(float(x)) for x in mix.means[j]] \
                + [repr(float(x)) for x in mix.variances[j]]
            lines.append(f"{name},{j}," + ",".join(vals))
    (out / "world.csv").write_text("\n".join(lines) + "\n")


def read_meta(path: str | Path) -> dict[str, str]:
    meta = {}
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            key, _, val = line.partition("=")
            meta[key.strip()] = val.strip()
    return meta


def read_world(world_dir: str | Path) -> WorldSpec:
    from .core import read_dataset_csv

    d = Path(world_dir)
    meta = read_meta(d / "world.meta")
    k = int(meta["k"])
    mixtures: dict[str, list] = {"generator": [], "reference": []}
    for line in (d / "world.csv").read_text().splitlines()[1:]:
        parts = line.split(",")
        vals = [float(x) for x in parts[2:]]
        mixtures[parts[0]].append((vals[0], vals[1:1 + k], vals[1 + k:1 + 2 * k]))

    def mix(rows):
        w, m, v = zip(*rows)
        w = np.array(w)
        return Generator(w / w.sum() if abs(w.sum() - 1) > 1e-12 else w, np.array(m), np.array(v), 0)

    world = WorldSpec(
        seed=int(meta["seed"]), k=k,
        z_star=np.array([float(x) for x in meta["z_star"].split()]),
        scale=float(meta["scale"]), noise_sd=float(meta["noise_sd"]),
        sa_direction=np.array([float(x) for x in meta["sa_direction"].split()]),
        init_generator=mix(mixtures["generator"]), reference_mixture=mix(mixtures["reference"]),
        feature_map_seed=int(meta["feature_map_seed"]), fingerprint_seed=int(meta["fingerprint_seed"]),
        calibration={k2.split(".", 1)[1]: float(v) for k2, v in meta.items() if k2.startswith("calibration.")},
    )
    ref_path = d / "reference.csv"
    if ref_path.exists():
        world.reference_set = read_dataset_csv(ref_path, world.build_candidates)
    return world


def with_generator(world: WorldSpec, g: Generator) -> WorldSpec:
    return replace(world, init_generator=g)
