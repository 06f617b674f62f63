"""Progressive selection loop.

Each iteration refits the Gaussian model on the current real set, scores the
virtual pool by multi-scale gap, draws transformation candidates by
temperature-weighted sampling, hands them to the transformer backend, and
migrates them from the pool into the real set. States are immutable; an
iteration either commits a complete new state or leaves the input untouched.

Backends are abstract: anything with ``embed(request)`` returning
{scale: {id: values}} and ``transform(request)`` returning {id: values}
works, whether in-process or a subprocess driven through the adapter
protocol.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .errors import EmptyPool, EmptySet, IdMismatch, UnknownId
from .gap import DEFAULT_SCALES, GapScore, MultiScaleFeatures, min_gap, score_pool
from .gaussian import FeatureSet, FeatureVector, GaussianClassModel
from .protocol import (
    CANONICAL_SCALE,
    AdapterRequest,
    InstanceMetadata,
    dump_json,
    load_json,
    model_from_dict,
    model_to_dict,
)
from .sampler import SamplerConfig, select_candidates, weight

ORIGIN_REAL = "original-real"
ORIGIN_TRANSFORMED = "transformed-virtual"

DEFAULT_ITERATIONS = 5
DEFAULT_RIDGE_SCALE = 1e-6
DEFAULT_DIM = 32
DEFAULT_GAMMA = 0.8

STATE_FORMAT = "ptl-state"
STATE_VERSION = 1


class EmbedderBackend(Protocol):
    def embed(self, request: AdapterRequest) -> dict[int, dict[int, np.ndarray]]: ...


class TransformerBackend(Protocol):
    def transform(self, request: AdapterRequest) -> dict[int, np.ndarray]: ...


# Called after each committed iteration with the scores that drove it.
IterationObserver = Callable[[int, GaussianClassModel, list[GapScore], "SelectionManifest", "PtlState"], None]


@dataclass(frozen=True)
class RealInstance:
    instance_id: int
    origin: str
    metadata: InstanceMetadata | None = None

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "origin": self.origin,
            "metadata": self.metadata.to_dict() if self.metadata else None,
        }

    @staticmethod
    def from_dict(d: dict) -> "RealInstance":
        md = d.get("metadata")
        return RealInstance(
            instance_id=int(d["instance_id"]),
            origin=d["origin"],
            metadata=InstanceMetadata.from_dict(md) if md else None,
        )


@dataclass(frozen=True)
class VirtualInstance:
    instance_id: int
    metadata: InstanceMetadata | None = None

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "metadata": self.metadata.to_dict() if self.metadata else None,
        }

    @staticmethod
    def from_dict(d: dict) -> "VirtualInstance":
        md = d.get("metadata")
        return VirtualInstance(
            instance_id=int(d["instance_id"]),
            metadata=InstanceMetadata.from_dict(md) if md else None,
        )


@dataclass(frozen=True)
class SelectedCandidate:
    instance_id: int
    gap: float
    weight: float
    argmin_scale: int

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "gap": self.gap,
            "weight": self.weight,
            "argmin_scale": self.argmin_scale,
        }

    @staticmethod
    def from_dict(d: dict) -> "SelectedCandidate":
        return SelectedCandidate(
            instance_id=int(d["instance_id"]),
            gap=float(d["gap"]),
            weight=float(d["weight"]),
            argmin_scale=int(d["argmin_scale"]),
        )


@dataclass(frozen=True)
class ModelSummary:
    dim: int
    sample_count: int
    ridge_scale_used: float
    mean_norm: float

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "sample_count": self.sample_count,
            "ridge_scale_used": self.ridge_scale_used,
            "mean_norm": self.mean_norm,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSummary":
        return ModelSummary(
            dim=int(d["dim"]),
            sample_count=int(d["sample_count"]),
            ridge_scale_used=float(d["ridge_scale_used"]),
            mean_norm=float(d["mean_norm"]),
        )

    @staticmethod
    def of(model: GaussianClassModel) -> "ModelSummary":
        return ModelSummary(
            dim=model.dim,
            sample_count=model.sample_count,
            ridge_scale_used=model.ridge_scale_used,
            mean_norm=float(np.linalg.norm(model.mean)),
        )


@dataclass(frozen=True)
class SelectionManifest:
    """The auditable record of one iteration's candidate selection."""

    iteration: int
    seed: int
    tau: float
    n_requested: int
    selected: tuple[SelectedCandidate, ...]
    shortfall: bool
    model_summary: ModelSummary

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "seed": self.seed,
            "tau": self.tau,
            "n_requested": self.n_requested,
            "selected": [c.to_dict() for c in self.selected],
            "shortfall": self.shortfall,
            "model_summary": self.model_summary.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "SelectionManifest":
        return SelectionManifest(
            iteration=int(d["iteration"]),
            seed=int(d["seed"]),
            tau=float(d["tau"]),
            n_requested=int(d["n_requested"]),
            selected=tuple(SelectedCandidate.from_dict(c) for c in d["selected"]),
            shortfall=bool(d["shortfall"]),
            model_summary=ModelSummary.from_dict(d["model_summary"]),
        )


@dataclass(frozen=True)
class PtlConfig:
    """Loop configuration; validated at construction."""

    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    scales: tuple[int, ...] = DEFAULT_SCALES
    iterations: int = DEFAULT_ITERATIONS
    ridge_scale: float = DEFAULT_RIDGE_SCALE
    dim: int = DEFAULT_DIM
    gamma: float = DEFAULT_GAMMA
    category: str = "object"
    embedder_endpoint: str | None = None
    transformer_endpoint: str | None = None
    adapter_timeout: float = 3600.0
    anchors_path: str | None = None
    strict_scales: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.scales:
            raise ValueError("scales must be non-empty")
        if len(set(self.scales)) != len(self.scales):
            raise ValueError("scales must be unique")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if self.ridge_scale < 0:
            raise ValueError("ridge_scale must be nonnegative")
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))


@dataclass(frozen=True)
class PtlState:
    """The evolving (real set, virtual pool) pair with its audit trail."""

    iteration: int
    real_set: dict[int, RealInstance]
    virtual_pool: dict[int, VirtualInstance]
    model: GaussianClassModel | None = None
    history: tuple[SelectionManifest, ...] = ()
    world: dict | None = None  # synthetic-world provenance, opaque here
    stop_reason: str | None = None

    def __post_init__(self):
        overlap = self.real_set.keys() & self.virtual_pool.keys()
        if overlap:
            raise ValueError(f"real/virtual id overlap: {sorted(overlap)[:5]}")
        if len(self.history) != self.iteration:
            raise ValueError(
                f"history length {len(self.history)} != iteration {self.iteration}"
            )

    def population(self) -> int:
        return len(self.real_set) + len(self.virtual_pool)

    def to_dict(self) -> dict:
        return {
            "format": STATE_FORMAT,
            "version": STATE_VERSION,
            "iteration": self.iteration,
            "stop_reason": self.stop_reason,
            "real_set": [self.real_set[i].to_dict() for i in sorted(self.real_set)],
            "virtual_pool": [self.virtual_pool[i].to_dict() for i in sorted(self.virtual_pool)],
            "model": model_to_dict(self.model) if self.model else None,
            "history": [m.to_dict() for m in self.history],
            "world": self.world,
        }

    @staticmethod
    def from_dict(d: dict) -> "PtlState":
        if d.get("format") != STATE_FORMAT:
            raise ValueError(f"not a state snapshot: format={d.get('format')!r}")
        if d.get("version") != STATE_VERSION:
            raise ValueError(f"unsupported state version {d.get('version')!r}")
        return PtlState(
            iteration=int(d["iteration"]),
            real_set={int(r["instance_id"]): RealInstance.from_dict(r) for r in d["real_set"]},
            virtual_pool={
                int(v["instance_id"]): VirtualInstance.from_dict(v) for v in d["virtual_pool"]
            },
            model=model_from_dict(d["model"]) if d.get("model") else None,
            history=tuple(SelectionManifest.from_dict(m) for m in d["history"]),
            world=d.get("world"),
            stop_reason=d.get("stop_reason"),
        )


def save_state(path, state: PtlState) -> None:
    dump_json(path, state.to_dict())


def load_state(path) -> PtlState:
    return PtlState.from_dict(load_json(path))


def iteration_seed(base_seed: int, iteration: int) -> int:
    """Per-iteration sampler seed: (base + t) mod 2^64, recorded in manifests."""
    return (base_seed + iteration) % 2**64


def refit_model(
    state: PtlState, embedder: EmbedderBackend, cfg: PtlConfig
) -> GaussianClassModel:
    """Fit the Gaussian on fresh canonical embeddings of every real member.

    Previously transformed instances are re-embedded like everything else;
    backends are expected to reflect their post-transform features.
    """
    ids = sorted(state.real_set)
    if len(ids) < 2:
        raise EmptySet(f"real set has {len(ids)} members, need at least 2")
    request = AdapterRequest(
        role="embedder",
        iteration=state.iteration,
        seed=cfg.sampler.seed,
        dim=cfg.dim,
        instance_ids=tuple(ids),
        scales=(CANONICAL_SCALE,),
        inputs=_embed_inputs(cfg),
    )
    by_id = embedder.embed(request)[CANONICAL_SCALE]
    members = [FeatureVector(i, by_id[i]) for i in ids]
    return fit_from_vectors(members, cfg)


def fit_from_vectors(members: Sequence[FeatureVector], cfg: PtlConfig) -> GaussianClassModel:
    from .gaussian import fit_gaussian

    fs = FeatureSet(category=cfg.category, dim=cfg.dim, members=members)
    return fit_gaussian(fs, cfg.ridge_scale)


def _embed_inputs(cfg: PtlConfig) -> dict:
    return {"anchors": cfg.anchors_path} if cfg.anchors_path else {}


def embed_pool(
    state: PtlState, embedder: EmbedderBackend, cfg: PtlConfig
) -> list[MultiScaleFeatures]:
    """Embed every pool member at all configured scales, ordered by id."""
    ids = sorted(state.virtual_pool)
    request = AdapterRequest(
        role="embedder",
        iteration=state.iteration,
        seed=cfg.sampler.seed,
        dim=cfg.dim,
        instance_ids=tuple(ids),
        scales=cfg.scales,
        inputs=_embed_inputs(cfg),
    )
    by_scale = embedder.embed(request)
    return [
        MultiScaleFeatures(
            i, {s: FeatureVector(i, by_scale[s][i]) for s in cfg.scales}
        )
        for i in ids
    ]


def set_update(
    state: PtlState,
    selected_ids: Sequence[int],
    transformed: Sequence[FeatureVector],
    *,
    manifest: SelectionManifest,
    model: GaussianClassModel,
) -> PtlState:
    """Migrate selected instances from the pool into the real set.

    Transformed records must carry exactly the selected ids. The transformed
    feature values themselves are backend-owned (instances are re-embedded at
    the next refit); only identity and metadata migrate. Any validation
    failure leaves the input state untouched.
    """
    selected = sorted(int(i) for i in selected_ids)
    unknown = [i for i in selected if i not in state.virtual_pool]
    if unknown:
        raise UnknownId(f"selected ids not in pool: {unknown[:5]}")
    got = sorted(fv.instance_id for fv in transformed)
    if got != selected:
        raise IdMismatch(
            f"transformer returned ids {got[:5]}..., selected {selected[:5]}..."
        )

    real = dict(state.real_set)
    pool = dict(state.virtual_pool)
    for i in selected:
        v = pool.pop(i)
        real[i] = RealInstance(instance_id=i, origin=ORIGIN_TRANSFORMED, metadata=v.metadata)

    new_state = PtlState(
        iteration=state.iteration + 1,
        real_set=real,
        virtual_pool=pool,
        model=model,
        history=state.history + (manifest,),
        world=state.world,
        stop_reason=state.stop_reason,
    )
    assert new_state.population() == state.population(), "conservation violated"
    return new_state


def run_iteration(
    state: PtlState,
    cfg: PtlConfig,
    embedder: EmbedderBackend,
    transformer: TransformerBackend,
    observer: IterationObserver | None = None,
) -> PtlState:
    """One full cycle: refit → score → select → transform → set update.

    Atomic: any backend or validation error propagates and the input state
    (never mutated) remains the caller's current state.
    """
    if not state.virtual_pool:
        raise EmptyPool("virtual pool is empty")

    model = refit_model(state, embedder, cfg)
    pool_features = embed_pool(state, embedder, cfg)
    scores = score_pool(model, pool_features, cfg.scales, strict=cfg.strict_scales)

    seed = iteration_seed(cfg.sampler.seed, state.iteration)
    draw_cfg = SamplerConfig(tau=cfg.sampler.tau, n=cfg.sampler.n, seed=seed)
    selected_ids = select_candidates(scores, draw_cfg)

    transform_request = AdapterRequest(
        role="transformer",
        iteration=state.iteration,
        seed=seed,
        dim=cfg.dim,
        instance_ids=tuple(selected_ids),
        scales=(CANONICAL_SCALE,),
        inputs={
            **_embed_inputs(cfg),
            "target_mean": [float(v) for v in model.mean],
            "gamma": cfg.gamma,
            "real_ids": sorted(state.real_set),
        },
    )
    transformed_by_id = transformer.transform(transform_request)
    transformed = [FeatureVector(i, transformed_by_id[i]) for i in sorted(transformed_by_id)]

    by_id = {s.instance_id: s for s in scores}
    manifest = SelectionManifest(
        iteration=state.iteration,
        seed=seed,
        tau=cfg.sampler.tau,
        n_requested=cfg.sampler.n,
        selected=tuple(
            SelectedCandidate(
                instance_id=i,
                gap=by_id[i].gap,
                weight=weight(by_id[i].gap, cfg.sampler.tau),
                argmin_scale=by_id[i].argmin_scale,
            )
            for i in selected_ids
        ),
        shortfall=len(selected_ids) < cfg.sampler.n,
        model_summary=ModelSummary.of(model),
    )

    new_state = set_update(state, selected_ids, transformed, manifest=manifest, model=model)
    if observer is not None:
        observer(state.iteration, model, scores, manifest, new_state)
    return new_state


def run(
    initial: PtlState,
    cfg: PtlConfig,
    embedder: EmbedderBackend,
    transformer: TransformerBackend,
    snapshot_dir=None,
    observer: IterationObserver | None = None,
) -> PtlState:
    """Execute cfg.iterations cycles, persisting a snapshot after each.

    Stops early with ``stop_reason="pool-exhausted"`` when the pool empties;
    the persisted state always reflects the last completed iteration.
    """
    snapshot_dir = Path(snapshot_dir) if snapshot_dir is not None else None
    if snapshot_dir is not None:
        snapshot_dir.mkdir(parents=True, exist_ok=True)
        _persist(snapshot_dir, initial)

    state = initial
    for _ in range(cfg.iterations):
        if not state.virtual_pool:
            state = dataclasses.replace(state, stop_reason="pool-exhausted")
            if snapshot_dir is not None:
                _persist(snapshot_dir, state)
            break
        state = run_iteration(state, cfg, embedder, transformer, observer=observer)
        if snapshot_dir is not None:
            _persist(snapshot_dir, state)
    return state


def _persist(snapshot_dir: Path, state: PtlState) -> None:
    save_state(snapshot_dir / f"state_iter{state.iteration:04d}.json", state)
    save_state(snapshot_dir / "state.json", state)
