"""Synthetic world and in-process simulated backends.

Generates real/virtual feature distributions keyed to a UAV camera grid
(characters × poses × altitudes × circle radii × camera angles × sun
angles). Virtual instances drift away from the real distribution along a
fixed direction, linearly in the camera's Euclidean distance from the
subject, so nearby cameras have small domain gaps. The simulated
transformer pulls a candidate's features toward the real mean by a fixed
factor, which is what makes the pool's gap distribution contract over
iterations.

The world is immutable: post-transform features are precomputed at
generation time (the pull formula does not depend on when the transform
happens), so replaying or resuming a run from a snapshot reproduces every
byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, UnknownId
from .gap import DEFAULT_SCALES, GapScore, score_pool
from .gaussian import FeatureSet, FeatureVector, GaussianClassModel, fit_gaussian
from .loop import (
    DEFAULT_RIDGE_SCALE,
    ORIGIN_REAL,
    ORIGIN_TRANSFORMED,
    PtlConfig,
    PtlState,
    RealInstance,
    VirtualInstance,
    embed_pool,
    run,
)
from .protocol import CANONICAL_SCALE, AdapterRequest, InstanceMetadata
from .reports import histogram_rows, spread_rows

VIRTUAL_ID_BASE = 1_000_000

WORLD_FORMAT = "ptl-synth-world"
WORLD_VERSION = 1


@dataclass(frozen=True)
class GridConfig:
    """Camera/rendering grid. Defaults give 8·3·10·6·12·1 = 17,280 cells."""

    characters: int = 8
    poses: int = 3
    altitudes_m: tuple[float, ...] = tuple(float(a) for a in range(5, 51, 5))
    radii_m: tuple[float, ...] = tuple(float(r) for r in range(5, 31, 5))
    camera_angles_deg: tuple[float, ...] = tuple(float(a) for a in range(0, 360, 30))
    sun_angles: tuple[int, ...] = (1,)

    def size(self) -> int:
        return (
            self.characters
            * self.poses
            * len(self.altitudes_m)
            * len(self.radii_m)
            * len(self.camera_angles_deg)
            * len(self.sun_angles)
        )

    def to_dict(self) -> dict:
        return {
            "characters": self.characters,
            "poses": self.poses,
            "altitudes_m": list(self.altitudes_m),
            "radii_m": list(self.radii_m),
            "camera_angles_deg": list(self.camera_angles_deg),
            "sun_angles": list(self.sun_angles),
        }

    @staticmethod
    def from_dict(d: dict) -> "GridConfig":
        return GridConfig(
            characters=int(d["characters"]),
            poses=int(d["poses"]),
            altitudes_m=tuple(float(a) for a in d["altitudes_m"]),
            radii_m=tuple(float(r) for r in d["radii_m"]),
            camera_angles_deg=tuple(float(a) for a in d["camera_angles_deg"]),
            sun_angles=tuple(int(s) for s in d["sun_angles"]),
        )


@dataclass(frozen=True)
class WorldConfig:
    """Knobs of the synthetic feature distributions.

    ``kappa`` is the gap slope: the virtual mean shift per meter of camera
    distance along a fixed unit direction. ``gamma`` is the transformer's
    pull factor toward the real mean. Spreads are isotropic standard
    deviations (the real and virtual covariances are spread²·I).

    ``transform_noise`` is a relative factor ν: the transform adds noise of
    std ν·sqrt(γ(2−γ))·virtual_spread. That scaling is the largest family
    under which the pull strictly reduces the expected gap for every
    γ ∈ (0, 1] (the pull shrinks the squared offset by (1−γ)² = 1−γ(2−γ),
    so noise variance up to γ(2−γ)·σ_V² keeps the reduction strict), while
    at ν close to 1 the transformed instances keep near-realistic spread —
    which is what lets the fitted covariance, and with it the remaining
    pool's gap distribution, settle instead of collapsing.
    """

    dim: int = 32
    real_count: int = 50
    kappa: float = 0.8
    gamma: float = 0.8
    real_spread: float = 1.0
    virtual_spread: float = 1.0
    scale_jitter: float = 0.05  # × rms per-coordinate std of the virtual noise
    transform_noise: float = 0.95  # ν, relative to the strict-reduction bound
    scales: tuple[int, ...] = DEFAULT_SCALES
    grid: GridConfig = field(default_factory=GridConfig)

    def __post_init__(self):
        if self.real_count < 2:
            raise ValueError("real_count must be >= 2")
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "real_count": self.real_count,
            "kappa": self.kappa,
            "gamma": self.gamma,
            "real_spread": self.real_spread,
            "virtual_spread": self.virtual_spread,
            "scale_jitter": self.scale_jitter,
            "transform_noise": self.transform_noise,
            "scales": list(self.scales),
            "grid": self.grid.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "WorldConfig":
        return WorldConfig(
            dim=int(d["dim"]),
            real_count=int(d["real_count"]),
            kappa=float(d["kappa"]),
            gamma=float(d["gamma"]),
            real_spread=float(d["real_spread"]),
            virtual_spread=float(d["virtual_spread"]),
            scale_jitter=float(d["scale_jitter"]),
            transform_noise=float(d["transform_noise"]),
            scales=tuple(int(s) for s in d["scales"]),
            grid=GridConfig.from_dict(d["grid"]),
        )


@dataclass(frozen=True)
class SyntheticWorld:
    config: WorldConfig
    seed: int
    mu_real: np.ndarray
    direction: np.ndarray  # unit vector of the virtual domain shift
    real_ids: tuple[int, ...]
    virtual_ids: tuple[int, ...]
    real_features: dict[int, np.ndarray]
    virtual_anchor: dict[int, np.ndarray]
    virtual_scaled: dict[int, dict[int, np.ndarray]]  # scale -> id -> values
    transformed_anchor: dict[int, np.ndarray]
    metadata: dict[int, InstanceMetadata]

    def provenance(self) -> dict:
        return {
            "format": WORLD_FORMAT,
            "version": WORLD_VERSION,
            "seed": self.seed,
            "config": self.config.to_dict(),
        }

    def real_feature_set(self, category: str = "object") -> FeatureSet:
        members = [FeatureVector(i, self.real_features[i]) for i in self.real_ids]
        return FeatureSet(category=category, dim=self.config.dim, members=members)

    def initial_state(self) -> PtlState:
        return PtlState(
            iteration=0,
            real_set={i: RealInstance(i, ORIGIN_REAL) for i in self.real_ids},
            virtual_pool={
                i: VirtualInstance(i, self.metadata[i]) for i in self.virtual_ids
            },
            world=self.provenance(),
        )

    def camera_distances(self) -> dict[int, float]:
        return {i: self.metadata[i].camera_distance() for i in self.virtual_ids}


def transform_noise_sigma(cfg: WorldConfig) -> float:
    """Absolute noise std of the pull: ν·sqrt(γ(2−γ))·σ_V."""
    return cfg.transform_noise * np.sqrt(cfg.gamma * (2.0 - cfg.gamma)) * cfg.virtual_spread


def generate_world(cfg: WorldConfig, seed: int) -> SyntheticWorld:
    """Deterministically build the world from one Philox stream.

    Real features ~ N(μ_R, spread²I). The virtual anchor for a grid cell at
    camera distance d = √(altitude² + radius²) is
    N(μ_R + κ·d·u, spread²I) for the fixed unit direction u; each configured
    scale gets an independent small jitter so the multi-scale minimum is
    non-degenerate. Post-transform anchors are
    (1−γ)·anchor + γ·μ_R + noise, precomputed here.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    dim, grid = cfg.dim, cfg.grid

    mu_real = rng.normal(0.0, 1.0, dim)
    raw_dir = rng.normal(0.0, 1.0, dim)
    direction = raw_dir / np.linalg.norm(raw_dir)

    m = cfg.real_count
    real_ids = tuple(range(1, m + 1))
    real_block = mu_real + cfg.real_spread * rng.normal(size=(m, dim))
    real_features = {i: real_block[k] for k, i in enumerate(real_ids)}

    meta_list: list[InstanceMetadata] = []
    next_id = VIRTUAL_ID_BASE + 1
    for character in range(grid.characters):
        for pose in range(grid.poses):
            for altitude in grid.altitudes_m:
                for radius in grid.radii_m:
                    for angle in grid.camera_angles_deg:
                        for sun in grid.sun_angles:
                            meta_list.append(
                                InstanceMetadata(
                                    instance_id=next_id,
                                    character=character,
                                    pose=pose,
                                    altitude_m=altitude,
                                    radius_m=radius,
                                    camera_angle_deg=angle,
                                    sun_angle=sun,
                                )
                            )
                            next_id += 1
    n = len(meta_list)
    virtual_ids = tuple(md.instance_id for md in meta_list)
    distances = np.array([md.camera_distance() for md in meta_list])

    anchors = (
        mu_real
        + cfg.kappa * distances[:, None] * direction
        + cfg.virtual_spread * rng.normal(size=(n, dim))
    )
    jitter_sigma = cfg.scale_jitter * cfg.virtual_spread
    scaled: dict[int, dict[int, np.ndarray]] = {}
    for s in sorted(cfg.scales):
        block = anchors + jitter_sigma * rng.normal(size=(n, dim))
        scaled[s] = {virtual_ids[k]: block[k] for k in range(n)}
    noise_sigma = transform_noise_sigma(cfg)
    transformed = (
        (1.0 - cfg.gamma) * anchors
        + cfg.gamma * mu_real
        + noise_sigma * rng.normal(size=(n, dim))
    )

    return SyntheticWorld(
        config=cfg,
        seed=seed,
        mu_real=mu_real,
        direction=direction,
        real_ids=real_ids,
        virtual_ids=virtual_ids,
        real_features=real_features,
        virtual_anchor={virtual_ids[k]: anchors[k] for k in range(n)},
        virtual_scaled=scaled,
        transformed_anchor={virtual_ids[k]: transformed[k] for k in range(n)},
        metadata={md.instance_id: md for md in meta_list},
    )


def regenerate_world(provenance: dict) -> SyntheticWorld:
    """Rebuild a world from the provenance block a snapshot carries."""
    if provenance.get("format") != WORLD_FORMAT:
        raise DataError(f"not world provenance: format={provenance.get('format')!r}")
    if provenance.get("version") != WORLD_VERSION:
        raise DataError(f"unsupported world version {provenance.get('version')!r}")
    return generate_world(WorldConfig.from_dict(provenance["config"]), int(provenance["seed"]))


class SimulatedBackends:
    """In-process embedder + transformer over one synthetic world.

    Honors the same request contract as the subprocess protocol. The
    embedder is refit-aware: once an instance has been transformed, its
    canonical embedding is the post-transform anchor.
    """

    def __init__(self, world: SyntheticWorld, transformed_ids: Sequence[int] = ()):
        self.world = world
        self.transformed: set[int] = set(int(i) for i in transformed_ids)

    @staticmethod
    def for_state(world: SyntheticWorld, state: PtlState) -> "SimulatedBackends":
        done = [
            i for i, inst in state.real_set.items() if inst.origin == ORIGIN_TRANSFORMED
        ]
        return SimulatedBackends(world, done)

    def _canonical(self, instance_id: int) -> np.ndarray:
        w = self.world
        if instance_id in self.transformed:
            return w.transformed_anchor[instance_id]
        if instance_id in w.real_features:
            return w.real_features[instance_id]
        if instance_id in w.virtual_anchor:
            return w.virtual_anchor[instance_id]
        raise UnknownId(f"instance {instance_id} not in the synthetic world")

    def embed(self, request: AdapterRequest) -> dict[int, dict[int, np.ndarray]]:
        out: dict[int, dict[int, np.ndarray]] = {}
        for s in request.scales:
            if s == CANONICAL_SCALE:
                out[s] = {i: self._canonical(i) for i in request.instance_ids}
                continue
            per_scale = self.world.virtual_scaled.get(s)
            if per_scale is None:
                raise UnknownId(f"scale {s} not generated in this world")
            vals = {}
            for i in request.instance_ids:
                if i not in per_scale:
                    raise UnknownId(f"instance {i} has no scale-{s} features")
                vals[i] = per_scale[i]
            out[s] = vals
        return out

    def transform(self, request: AdapterRequest) -> dict[int, np.ndarray]:
        out = {}
        for i in request.instance_ids:
            if i not in self.world.virtual_anchor:
                raise UnknownId(f"instance {i} not in the virtual pool of the world")
            out[i] = self.world.transformed_anchor[i]
            self.transformed.add(i)
        return out


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

def fixed_histogram_edges(world: SyntheticWorld, bins: int) -> np.ndarray:
    """Bin edges shared by every iteration's histogram: 0 to 1.02× the max
    gap of the full original pool under the initial model."""
    backends = SimulatedBackends(world)
    cfg = PtlConfig(dim=world.config.dim, scales=world.config.scales)
    state = world.initial_state()
    model = fit_gaussian(world.real_feature_set(), DEFAULT_RIDGE_SCALE)
    features = embed_pool(state, backends, cfg)
    gaps = [s.gap for s in score_pool(model, features, cfg.scales)]
    top = max(gaps) * 1.02 if gaps else 1.0
    return np.linspace(0.0, top, bins + 1)


def report_gap_histogram(
    world: SyntheticWorld,
    state: PtlState,
    model: GaussianClassModel,
    bins,
) -> list[tuple[float, float, int]]:
    """Histogram of the current pool's gaps under ``model``.

    ``bins`` is either an edge array or a bin count (edges then come from
    :func:`fixed_histogram_edges`, so reports stay comparable across
    iterations).
    """
    if model is None:
        raise DataError("no fitted model; run at least one iteration")
    edges = fixed_histogram_edges(world, bins) if isinstance(bins, int) else np.asarray(bins)
    backends = SimulatedBackends.for_state(world, state)
    cfg = PtlConfig(dim=world.config.dim, scales=world.config.scales)
    features = embed_pool(state, backends, cfg)
    gaps = [s.gap for s in score_pool(model, features, cfg.scales)]
    return histogram_rows(gaps, edges)


def accumulated_spread_counts(state: PtlState) -> dict[tuple[float, float], int]:
    """Per-(altitude, radius) counts of everything selected so far."""
    counts: dict[tuple[float, float], int] = {}
    lookup: dict[int, InstanceMetadata] = {}
    for inst in state.real_set.values():
        if inst.metadata is not None:
            lookup[inst.instance_id] = inst.metadata
    for inst in state.virtual_pool.values():
        if inst.metadata is not None:
            lookup[inst.instance_id] = inst.metadata
    for manifest in state.history:
        for cand in manifest.selected:
            md = lookup.get(cand.instance_id)
            if md is None:
                raise UnknownId(f"selected instance {cand.instance_id} has no metadata")
            key = (float(md.altitude_m), float(md.radius_m))
            counts[key] = counts.get(key, 0) + 1
    return counts


def report_metadata_spread(
    state: PtlState, grid: GridConfig | None = None
) -> list[tuple[float, float, int]]:
    """Accumulated selected counts on the full altitude × radius grid."""
    if not state.history:
        raise DataError("no completed iterations; nothing has been selected yet")
    if grid is None:
        if state.world is None:
            raise DataError("state carries no world provenance; pass the grid explicitly")
        grid = WorldConfig.from_dict(state.world["config"]).grid
    counts = accumulated_spread_counts(state)
    return spread_rows(grid.altitudes_m, grid.radii_m, counts)


# --------------------------------------------------------------------------
# End-to-end synthetic pipeline
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class IterationReport:
    """Per-iteration dynamics captured from the loop's own scoring pass."""

    index: int  # 1-based
    mean_pool_gap: float
    mean_selected_distance: float
    occupied_cells: int
    manifest_dict: dict
    histogram: list[tuple[float, float, int]]
    spread: list[tuple[float, float, int]]


@dataclass(frozen=True)
class SynthRunResult:
    world: SyntheticWorld
    final_state: PtlState
    edges: np.ndarray
    iterations: list[IterationReport]

    def mean_pool_gaps(self) -> list[float]:
        return [r.mean_pool_gap for r in self.iterations]

    def occupied_cell_counts(self) -> list[int]:
        return [r.occupied_cells for r in self.iterations]


def run_synthetic(
    world_cfg: WorldConfig,
    seed: int,
    ptl_cfg: PtlConfig,
    out_dir=None,
    bins: int = 40,
) -> SynthRunResult:
    """Generate a world and drive the full loop with simulated backends.

    When ``out_dir`` is given, per-iteration snapshots land in
    ``out_dir/snapshots`` and each iteration emits a gap-histogram and
    camera-spread report (CSV + PNG) under ``out_dir/reports``. Iteration
    i's histogram bins the scores that drove iteration i's selection, on
    edges fixed across the whole run.
    """
    if world_cfg.dim != ptl_cfg.dim:
        raise ValueError(f"world dim {world_cfg.dim} != loop dim {ptl_cfg.dim}")
    if set(ptl_cfg.scales) - set(world_cfg.scales):
        raise ValueError("loop scales must be generated by the world")

    world = generate_world(world_cfg, seed)
    backends = SimulatedBackends(world)
    edges = fixed_histogram_edges(world, bins)
    distances = world.camera_distances()

    reports_dir = None
    snapshots_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        reports_dir = out_dir / "reports"
        reports_dir.mkdir(parents=True, exist_ok=True)
        snapshots_dir = out_dir / "snapshots"

    collected: list[IterationReport] = []

    def observer(t, model, scores, manifest, new_state):
        from .reports import write_gap_histogram, write_metadata_spread

        index = t + 1
        gaps = [s.gap for s in scores]
        hist = histogram_rows(gaps, edges)
        spread = report_metadata_spread(new_state, grid=world.config.grid)
        occupied = sum(1 for _, _, c in spread if c > 0)
        selected_dist = [distances[c.instance_id] for c in manifest.selected]
        collected.append(
            IterationReport(
                index=index,
                mean_pool_gap=float(np.mean(gaps)) if gaps else 0.0,
                mean_selected_distance=float(np.mean(selected_dist)) if selected_dist else 0.0,
                occupied_cells=occupied,
                manifest_dict=manifest.to_dict(),
                histogram=hist,
                spread=spread,
            )
        )
        if reports_dir is not None:
            write_gap_histogram(
                reports_dir / f"gap_hist_iter{index}.csv",
                hist,
                title=f"domain gap distribution, iteration {index}",
            )
            write_metadata_spread(
                reports_dir / f"metadata_spread_iter{index}.csv",
                spread,
                title=f"accumulated selections, iteration {index}",
            )

    final_state = run(
        world.initial_state(),
        ptl_cfg,
        backends,
        backends,
        snapshot_dir=snapshots_dir,
        observer=observer,
    )
    return SynthRunResult(
        world=world, final_state=final_state, edges=edges, iterations=collected
    )
