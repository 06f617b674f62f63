"""Wire formats and the external-backend contract.

Covers the PTLF binary feature-file format, the imaging-condition metadata
CSV, canonical (byte-deterministic) JSON artifacts, and the subprocess
protocol by which embedder/transformer backends are driven:

    <endpoint> --request <manifest.json>

exit 0 plus well-formed declared outputs means success. Backend outputs are
produced in a temporary directory and only renamed into place after
validation, so partial results are never visible.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import shlex
import struct
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    AdapterFailure,
    BadMagic,
    DimensionMismatch,
    IoError,
    NonFiniteValue,
    OutputValidationError,
    ParseError,
    TruncatedFile,
    VersionMismatch,
)
from .gaussian import FeatureVector, GaussianClassModel
from .linalg import SpdMatrix, cholesky_decompose

MAGIC = b"PTLF"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHIIQ")  # magic, version, dim, scale, count
CANONICAL_SCALE = 0  # scale field value meaning "canonical/real resolution"

METADATA_COLUMNS = (
    "instance_id",
    "character",
    "pose",
    "altitude_m",
    "radius_m",
    "camera_angle_deg",
    "sun_angle",
)

DEFAULT_ADAPTER_TIMEOUT = 3600.0  # real backends train models
_STDERR_TAIL = 2000


# --------------------------------------------------------------------------
# PTLF binary feature files
# --------------------------------------------------------------------------

def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("values", "<f4", (dim,))])


def write_features(
    path, scale: int, vectors: Sequence[FeatureVector], dim: int | None = None
) -> None:
    """Write vectors as header ‖ count × (u64 id ‖ dim × f32), little-endian.

    ``dim`` is only needed for an empty list; otherwise it is taken from the
    vectors (which must agree). The file is fsynced before returning.
    """
    if vectors:
        dims = {fv.dim for fv in vectors}
        if len(dims) != 1:
            raise DimensionMismatch(f"vectors mix dims {sorted(dims)}")
        inferred = dims.pop()
        if dim is not None and dim != inferred:
            raise DimensionMismatch(f"dim {dim} given but vectors have dim {inferred}")
        dim = inferred
        ids = [fv.instance_id for fv in vectors]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate instance_ids")
    elif dim is None:
        raise ValueError("dim is required to write an empty feature file")

    body = np.empty(len(vectors), dtype=_record_dtype(dim))
    for i, fv in enumerate(vectors):
        body[i]["id"] = fv.instance_id
        body[i]["values"] = fv.values  # f64 -> f32 cast on assignment

    header = HEADER.pack(MAGIC, FORMAT_VERSION, dim, scale, len(vectors))
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(body.tobytes())
            fh.flush()
            os.fsync(fh.fileno())
    except OSError as exc:
        raise IoError(f"cannot write feature file {path}: {exc}") from exc


def read_features(path) -> tuple[int, list[FeatureVector]]:
    """Exact inverse of :func:`write_features`; rejects non-finite values."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read feature file {path}: {exc}") from exc

    if raw[:4] != MAGIC:
        raise BadMagic(f"{path}: magic {raw[:4]!r} != {MAGIC!r}")
    if len(raw) < HEADER.size:
        raise TruncatedFile(f"{path}: {len(raw)} bytes is shorter than the header")
    _, version, dim, scale, count = HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, supported {FORMAT_VERSION}")
    if dim < 1:
        raise TruncatedFile(f"{path}: header declares dim {dim}")

    expected = HEADER.size + count * (8 + 4 * dim)
    if len(raw) != expected:
        raise TruncatedFile(
            f"{path}: declared {count} records of dim {dim} "
            f"need {expected} bytes, file has {len(raw)}"
        )
    records = np.frombuffer(raw, dtype=_record_dtype(dim), count=count, offset=HEADER.size)
    values = records["values"]
    finite_rows = np.isfinite(values).all(axis=1) if count else np.ones(0, bool)
    if not finite_rows.all():
        bad = int(records["id"][np.flatnonzero(~finite_rows)[0]])
        raise NonFiniteValue(f"{path}: instance {bad} has non-finite values")
    vectors = [
        FeatureVector(int(records["id"][i]), values[i].astype(np.float64))
        for i in range(count)
    ]
    return int(scale), vectors


# --------------------------------------------------------------------------
# Imaging-condition metadata CSV
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class InstanceMetadata:
    """Camera-grid conditions a virtual instance was rendered under."""

    instance_id: int
    character: int
    pose: int
    altitude_m: float
    radius_m: float
    camera_angle_deg: float
    sun_angle: int

    def __post_init__(self):
        if not self.altitude_m > 0:
            raise ValueError(f"altitude_m must be > 0, got {self.altitude_m}")
        if not self.radius_m > 0:
            raise ValueError(f"radius_m must be > 0, got {self.radius_m}")
        if not 0 <= self.camera_angle_deg < 360:
            raise ValueError(f"camera_angle_deg must be in [0, 360), got {self.camera_angle_deg}")

    def camera_distance(self) -> float:
        """Euclidean distance from camera ring to the subject, in meters."""
        return float(np.hypot(self.altitude_m, self.radius_m))

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "character": self.character,
            "pose": self.pose,
            "altitude_m": self.altitude_m,
            "radius_m": self.radius_m,
            "camera_angle_deg": self.camera_angle_deg,
            "sun_angle": self.sun_angle,
        }

    @staticmethod
    def from_dict(d: dict) -> "InstanceMetadata":
        return InstanceMetadata(
            instance_id=int(d["instance_id"]),
            character=int(d["character"]),
            pose=int(d["pose"]),
            altitude_m=float(d["altitude_m"]),
            radius_m=float(d["radius_m"]),
            camera_angle_deg=float(d["camera_angle_deg"]),
            sun_angle=int(d["sun_angle"]),
        )


def read_metadata(path) -> list[InstanceMetadata]:
    """Parse the metadata CSV, strictly: exact header, exact column count."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot read metadata file {path}: {exc}") from exc
    if not rows or tuple(rows[0]) != METADATA_COLUMNS:
        raise ParseError(
            f"{path}: line 1: header must be {','.join(METADATA_COLUMNS)}"
        )
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(METADATA_COLUMNS):
            raise ParseError(
                f"{path}: line {lineno}: expected {len(METADATA_COLUMNS)} columns, got {len(row)}"
            )
        try:
            out.append(
                InstanceMetadata(
                    instance_id=int(row[0]),
                    character=int(row[1]),
                    pose=int(row[2]),
                    altitude_m=float(row[3]),
                    radius_m=float(row[4]),
                    camera_angle_deg=float(row[5]),
                    sun_angle=int(row[6]),
                )
            )
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}") from exc
    return out


def write_metadata(path, records: Sequence[InstanceMetadata]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METADATA_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.instance_id,
                    r.character,
                    r.pose,
                    format_float(r.altitude_m),
                    format_float(r.radius_m),
                    format_float(r.camera_angle_deg),
                    r.sun_angle,
                ]
            )


# --------------------------------------------------------------------------
# Canonical JSON artifacts
# --------------------------------------------------------------------------

def format_float(x: float) -> str:
    """Shortest decimal that round-trips; integers render without exponent."""
    if x == int(x) and abs(x) < 1e16:
        return str(int(x))
    return repr(float(x))


def canonical_json(obj) -> str:
    """Deterministic JSON: insertion key order, shortest round-trip floats."""
    return json.dumps(obj, ensure_ascii=False, indent=2, allow_nan=False)


def dump_json(path, obj) -> None:
    """Atomically write canonical JSON (tmp file + rename, fsynced)."""
    path = Path(path)
    text = canonical_json(obj) + "\n"
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(text)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc


def model_to_dict(model: GaussianClassModel) -> dict:
    return {
        "format": "ptl-model",
        "version": 1,
        "category": model.category,
        "dim": model.dim,
        "sample_count": model.sample_count,
        "ridge_scale_used": model.ridge_scale_used,
        "mean": [float(v) for v in model.mean],
        "covariance": [[float(v) for v in row] for row in model.covariance.entries],
    }


def model_from_dict(d: dict) -> GaussianClassModel:
    cov = SpdMatrix(np.array(d["covariance"], dtype=np.float64))
    return GaussianClassModel(
        category=d["category"],
        mean=np.array(d["mean"], dtype=np.float64),
        covariance=cov,
        factor=cholesky_decompose(cov),
        sample_count=int(d["sample_count"]),
        ridge_scale_used=float(d["ridge_scale_used"]),
    )


# --------------------------------------------------------------------------
# Adapter subprocess contract
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AdapterRequest:
    """One backend invocation, as carried by the request manifest JSON.

    ``outputs`` names the files the backend must produce; it is filled in by
    the transport (the in-process simulated backends answer in memory and
    never look at it).
    """

    role: str  # "embedder" | "transformer"
    iteration: int
    seed: int
    dim: int
    instance_ids: tuple[int, ...]
    scales: tuple[int, ...] = (CANONICAL_SCALE,)
    workspace: str = ""
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)

    def to_manifest(self) -> dict:
        return {
            "protocol": "ptl-adapter",
            "version": 1,
            "role": self.role,
            "iteration": self.iteration,
            "seed": self.seed,
            "dim": self.dim,
            "instance_ids": list(self.instance_ids),
            "scales": list(self.scales),
            "workspace": self.workspace,
            "inputs": self.inputs,
            "outputs": self.outputs,
        }


def _validate_feature_file(
    path: Path, want_scale: int, want_dim: int, want_ids: set[int]
) -> dict[int, np.ndarray]:
    if not path.is_file():
        raise OutputValidationError(f"declared output {path} was not produced")
    try:
        scale, vectors = read_features(path)
    except (BadMagic, VersionMismatch, TruncatedFile, NonFiniteValue, IoError) as exc:
        raise OutputValidationError(f"output {path} is malformed: {exc}") from exc
    if scale != want_scale:
        raise OutputValidationError(f"output {path}: scale {scale}, requested {want_scale}")
    by_id: dict[int, np.ndarray] = {}
    for fv in vectors:
        if fv.dim != want_dim:
            raise OutputValidationError(
                f"output {path}: instance {fv.instance_id} has dim {fv.dim}, requested {want_dim}"
            )
        by_id[fv.instance_id] = fv.values
    got = set(by_id)
    if got != want_ids:
        missing = sorted(want_ids - got)[:5]
        extra = sorted(got - want_ids)[:5]
        raise OutputValidationError(
            f"output {path}: id set mismatch (missing {missing}, unexpected {extra})"
        )
    return by_id


def invoke_adapter(
    endpoint: str,
    request: AdapterRequest,
    invocation_dir,
    timeout: float = DEFAULT_ADAPTER_TIMEOUT,
):
    """Run ``<endpoint> --request <manifest.json>`` and validate its outputs.

    Embedder requests return {scale: {instance_id: values}}; transformer
    requests return {instance_id: values}. Outputs land in a temporary
    subdirectory and are renamed into ``invocation_dir`` only after every
    declared file validates.
    """
    invocation_dir = Path(invocation_dir)
    invocation_dir.mkdir(parents=True, exist_ok=True)
    tmp_dir = invocation_dir / "tmp"
    tmp_dir.mkdir(exist_ok=True)

    if request.role == "embedder":
        outputs = {
            "features": {str(s): str(tmp_dir / f"features_s{s}.ptlf") for s in request.scales}
        }
    elif request.role == "transformer":
        outputs = {"transformed": str(tmp_dir / "transformed.ptlf")}
    else:
        raise ValueError(f"unknown adapter role {request.role!r}")
    request = dataclasses.replace(request, outputs=outputs)

    manifest_path = invocation_dir / "request.json"
    dump_json(manifest_path, request.to_manifest())

    argv = shlex.split(endpoint) + ["--request", str(manifest_path)]
    try:
        proc = subprocess.run(
            argv, capture_output=True, text=True, timeout=timeout, check=False
        )
    except subprocess.TimeoutExpired as exc:
        raise AdapterFailure(
            f"{request.role} backend timed out after {timeout:g}s", exit_code=None,
            stderr_tail=(exc.stderr or "")[-_STDERR_TAIL:] if exc.stderr else "",
        ) from exc
    except OSError as exc:
        raise AdapterFailure(f"cannot launch {argv[0]!r}: {exc}") from exc
    if proc.returncode != 0:
        raise AdapterFailure(
            f"{request.role} backend exited {proc.returncode}",
            exit_code=proc.returncode,
            stderr_tail=proc.stderr[-_STDERR_TAIL:],
        )

    want_ids = set(request.instance_ids)
    if request.role == "embedder":
        result = {
            int(s): _validate_feature_file(Path(p), int(s), request.dim, want_ids)
            for s, p in outputs["features"].items()
        }
    else:
        result = _validate_feature_file(
            Path(outputs["transformed"]), CANONICAL_SCALE, request.dim, want_ids
        )

    for name in sorted(os.listdir(tmp_dir)):
        os.replace(tmp_dir / name, invocation_dir / name)
    os.rmdir(tmp_dir)
    return result


class CommandBackend:
    """Embedder/transformer backend driven through the subprocess contract.

    Each invocation gets its own audit directory under ``workdir``; the
    sidecar ``workspace`` is shared between roles so a transformer's updates
    are visible to subsequent embedder calls.
    """

    def __init__(self, endpoint: str, workdir, timeout: float = DEFAULT_ADAPTER_TIMEOUT):
        self.endpoint = endpoint
        self.workdir = Path(workdir)
        self.timeout = timeout
        self._counter = 0

    def _invoke(self, request: AdapterRequest):
        self._counter += 1
        name = f"iter{request.iteration:04d}_{request.role}_{self._counter:03d}"
        workspace = self.workdir / "adapter_workspace"
        workspace.mkdir(parents=True, exist_ok=True)
        request = dataclasses.replace(request, workspace=str(workspace))
        return invoke_adapter(self.endpoint, request, self.workdir / name, self.timeout)

    def embed(self, request: AdapterRequest) -> dict[int, dict[int, np.ndarray]]:
        return self._invoke(request)

    def transform(self, request: AdapterRequest) -> dict[int, np.ndarray]:
        return self._invoke(request)
