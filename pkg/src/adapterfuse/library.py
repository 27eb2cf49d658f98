"""The adapter library: domain centroids paired with low-rank adapter sets.

A library is an ordered collection of domain records, each tying a centroid
embedding (plus optional covariance) to one adapter set.  Libraries are
immutable values; extending or excluding returns a new view and never touches
existing records.  Persistence uses a manifest-plus-blobs directory layout
with little-endian float32 payloads and per-blob checksums.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import NumericError, StructuralError, UsageError
from .tensor import AdapterSet, LoraPair, Matrix

FORMAT_VERSION = 1
DEFAULT_COVARIANCE_MIN_SAMPLES = 500
MANIFEST_NAME = "manifest.json"


class UnsupportedVersionError(StructuralError):
    """The on-disk format_version is newer than this code understands."""


class TruncatedBlobError(StructuralError):
    """An adapter payload file is shorter or longer than the manifest says."""


class ChecksumError(StructuralError):
    """An adapter payload file fails its recorded CRC32."""


@dataclasses.dataclass(frozen=True, eq=False)
class Embedding:
    """A finite real vector; every embedding in one library shares its dim."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if arr.ndim != 1 or arr.shape[0] < 1:
            raise StructuralError(
                f"embedding must be a non-empty 1-D vector, got shape {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise NumericError("embedding entries must all be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclasses.dataclass(frozen=True, eq=False)
class DomainRecord:
    """One library entry: where a domain lives and how to adapt to it."""

    domain_id: str
    centroid: Embedding
    sample_count: int
    adapter: AdapterSet
    covariance: Matrix | None = None
    metadata: Mapping[str, str] = dataclasses.field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.domain_id:
            raise StructuralError("domain_id must be non-empty")
        if self.sample_count < 1:
            raise StructuralError(
                f"domain {self.domain_id!r}: sample_count must be >= 1"
            )
        if self.covariance is not None:
            dim = self.centroid.dim
            if self.covariance.shape != (dim, dim):
                raise StructuralError(
                    f"domain {self.domain_id!r}: covariance shape "
                    f"{self.covariance.shape} does not match embedding dim {dim}"
                )
            c = self.covariance.data
            if not np.allclose(c, c.T, atol=1e-9, rtol=0.0):
                raise StructuralError(
                    f"domain {self.domain_id!r}: covariance is not symmetric"
                )
            if float(np.linalg.eigvalsh(c).min()) < -1e-8:
                raise StructuralError(
                    f"domain {self.domain_id!r}: covariance has negative eigenvalues"
                )
        object.__setattr__(self, "metadata", dict(self.metadata))

    @property
    def mahalanobis_eligible(self) -> bool:
        return self.covariance is not None


def _layer_signature(adapter: AdapterSet) -> dict[str, tuple[int, int, int, float]]:
    return {
        p.layer_name: (p.out_dim, p.rank, p.in_dim, p.alpha) for p in adapter.layers
    }


@dataclasses.dataclass(frozen=True, eq=False)
class Library:
    """Ordered domain records plus the invariants that make them fusable."""

    records: tuple[DomainRecord, ...]
    embedding_dim: int
    format_version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        if self.embedding_dim < 1:
            raise StructuralError("embedding_dim must be positive")
        ids = [r.domain_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise StructuralError("duplicate domain_id in library")
        for r in self.records:
            if r.centroid.dim != self.embedding_dim:
                raise StructuralError(
                    f"domain {r.domain_id!r}: centroid dim {r.centroid.dim} "
                    f"does not match library dim {self.embedding_dim}"
                )
        if self.records:
            ref = self.records[0]
            ref_sig = _layer_signature(ref.adapter)
            for r in self.records[1:]:
                if _layer_signature(r.adapter) != ref_sig:
                    raise StructuralError(
                        f"domain {r.domain_id!r}: adapter layer structure does "
                        f"not match domain {ref.domain_id!r} (layer names, "
                        f"shapes, rank, and alpha must agree library-wide)"
                    )

    @property
    def size(self) -> int:
        return len(self.records)

    @property
    def domain_ids(self) -> tuple[str, ...]:
        return tuple(r.domain_id for r in self.records)

    @property
    def layer_order(self) -> tuple[str, ...]:
        """Canonical layer iteration order: the first record's order."""
        if not self.records:
            return ()
        return self.records[0].adapter.layer_names

    def record(self, domain_id: str) -> DomainRecord:
        for r in self.records:
            if r.domain_id == domain_id:
                return r
        raise UsageError(f"no domain {domain_id!r} in library")


def compute_centroid(embeddings: Sequence[Embedding]) -> Embedding:
    """Coordinate-wise arithmetic mean of a non-empty set of embeddings."""
    if len(embeddings) == 0:
        raise UsageError("cannot take the centroid of zero embeddings")
    dim = embeddings[0].dim
    for e in embeddings[1:]:
        if e.dim != dim:
            raise StructuralError(
                f"mixed embedding dims: {dim} vs {e.dim}"
            )
    stacked = np.stack([e.values for e in embeddings])
    return Embedding(stacked.mean(axis=0))


def compute_covariance(embeddings: Sequence[Embedding], ridge: float) -> Matrix:
    """Sample covariance (N-1 divisor) plus ridge times the identity."""
    if len(embeddings) < 2:
        raise UsageError("covariance needs at least 2 embeddings")
    if ridge < 0:
        raise UsageError(f"ridge must be nonnegative, got {ridge}")
    dim = embeddings[0].dim
    for e in embeddings[1:]:
        if e.dim != dim:
            raise StructuralError(f"mixed embedding dims: {dim} vs {e.dim}")
    stacked = np.stack([e.values for e in embeddings])
    centered = stacked - stacked.mean(axis=0)
    cov = centered.T @ centered / (len(embeddings) - 1)
    cov = 0.5 * (cov + cov.T) + ridge * np.eye(dim)
    return Matrix(cov)


def build_record(
    domain_id: str,
    embeddings: Sequence[Embedding],
    adapter: AdapterSet,
    ridge: float = 0.0,
    min_samples: int = DEFAULT_COVARIANCE_MIN_SAMPLES,
    metadata: Mapping[str, str] | None = None,
) -> DomainRecord:
    """Summarize a domain's embeddings and pair them with its adapter.

    Covariance is attached only when the domain has at least ``min_samples``
    embeddings; smaller domains stay centroid-only and are skipped by
    Mahalanobis retrieval rather than failing it.
    """
    centroid = compute_centroid(embeddings)
    covariance = None
    if len(embeddings) >= max(min_samples, 2):
        covariance = compute_covariance(embeddings, ridge)
    return DomainRecord(
        domain_id=domain_id,
        centroid=centroid,
        sample_count=len(embeddings),
        adapter=adapter,
        covariance=covariance,
        metadata=metadata or {},
    )


def extend(lib: Library, record: DomainRecord) -> Library:
    """Append one record, returning a new library; the input is untouched."""
    if record.domain_id in lib.domain_ids:
        raise UsageError(f"domain {record.domain_id!r} already in library")
    return Library(
        records=lib.records + (record,),
        embedding_dim=lib.embedding_dim,
        format_version=lib.format_version,
    )


def exclude(lib: Library, domain_id: str) -> Library:
    """Drop one domain, returning a view that shares the remaining records."""
    if domain_id not in lib.domain_ids:
        raise UsageError(f"no domain {domain_id!r} in library")
    return Library(
        records=tuple(r for r in lib.records if r.domain_id != domain_id),
        embedding_dim=lib.embedding_dim,
        format_version=lib.format_version,
    )


# ---------------------------------------------------------------------------
# Persistence: manifest.json plus one float32 blob per adapter set.
# ---------------------------------------------------------------------------


def _blob_name(index: int) -> str:
    return f"adapter_{index:04d}.bin"


def _adapter_blob(adapter: AdapterSet, layer_order: Sequence[str]) -> bytes:
    # layers in manifest order, B before A, little-endian f32 row-major
    chunks = []
    for name in layer_order:
        p = adapter.layer(name)
        chunks.append(np.asarray(p.B.data, dtype="<f4").tobytes(order="C"))
        chunks.append(np.asarray(p.A.data, dtype="<f4").tobytes(order="C"))
    return b"".join(chunks)


def _record_entry(rec: DomainRecord, layer_order: Sequence[str], blob: str, crc: int) -> dict:
    layers = []
    for name in layer_order:
        p = rec.adapter.layer(name)
        layers.append(
            {
                "name": name,
                "rows": p.out_dim,
                "rank": p.rank,
                "cols": p.in_dim,
                "alpha": p.alpha,
            }
        )
    return {
        "domain_id": rec.domain_id,
        "sample_count": rec.sample_count,
        "centroid": [float(v) for v in rec.centroid.values],
        "covariance": None
        if rec.covariance is None
        else [[float(v) for v in row] for row in rec.covariance.data],
        "adapter_id": rec.adapter.adapter_id,
        "adapter_metadata": dict(rec.adapter.metadata),
        "metadata": dict(rec.metadata),
        "layers": layers,
        "blob": blob,
        "crc32": crc,
    }


def manifest_dict(lib: Library) -> dict:
    """The manifest exactly as save() writes it, built in memory."""
    layer_order = lib.layer_order
    records = []
    for i, rec in enumerate(lib.records):
        blob = _blob_name(i)
        payload = _adapter_blob(rec.adapter, layer_order)
        crc = zlib.crc32(payload) & 0xFFFFFFFF
        records.append(_record_entry(rec, layer_order, blob, crc))
    return {
        "format_version": lib.format_version,
        "embedding_dim": lib.embedding_dim,
        "records": records,
    }


def library_digest(lib: Library) -> str:
    """SHA-256 of the canonical manifest serialization; stable per content."""
    canon = json.dumps(manifest_dict(lib), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def save(lib: Library, path: str | Path) -> None:
    """Write manifest.json and one payload blob per record into a directory."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    layer_order = lib.layer_order
    manifest = manifest_dict(lib)
    for i, rec in enumerate(lib.records):
        payload = _adapter_blob(rec.adapter, layer_order)
        (root / _blob_name(i)).write_bytes(payload)
    text = json.dumps(manifest, indent=2, sort_keys=True)
    (root / MANIFEST_NAME).write_text(text + "\n", encoding="utf-8")


def _expected_blob_bytes(layers: Sequence[dict]) -> int:
    total = 0
    for layer in layers:
        total += layer["rows"] * layer["rank"] + layer["rank"] * layer["cols"]
    return total * 4


def load(path: str | Path) -> Library:
    """Read a library directory back; failures name what went wrong where."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise StructuralError(f"no {MANIFEST_NAME} under {root}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise StructuralError(f"unreadable manifest: {exc}") from exc

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"library format_version {version} is not supported "
            f"(this build reads version {FORMAT_VERSION})"
        )

    records = []
    for entry in manifest["records"]:
        blob_name = entry["blob"]
        blob_path = root / blob_name
        if not blob_path.is_file():
            raise TruncatedBlobError(f"missing payload blob {blob_name}")
        payload = blob_path.read_bytes()
        expected = _expected_blob_bytes(entry["layers"])
        if len(payload) != expected:
            raise TruncatedBlobError(
                f"blob {blob_name} has {len(payload)} bytes, expected {expected}"
            )
        crc = zlib.crc32(payload) & 0xFFFFFFFF
        if crc != entry["crc32"]:
            raise ChecksumError(
                f"blob {blob_name} fails its checksum "
                f"(recorded {entry['crc32']}, computed {crc})"
            )

        pairs = []
        offset = 0
        for layer in entry["layers"]:
            d, r, k = layer["rows"], layer["rank"], layer["cols"]
            b_count, a_count = d * r, r * k
            b_vals = np.frombuffer(
                payload, dtype="<f4", count=b_count, offset=offset
            ).astype(np.float64)
            offset += b_count * 4
            a_vals = np.frombuffer(
                payload, dtype="<f4", count=a_count, offset=offset
            ).astype(np.float64)
            offset += a_count * 4
            pairs.append(
                LoraPair(
                    layer_name=layer["name"],
                    B=Matrix(b_vals.reshape(d, r)),
                    A=Matrix(a_vals.reshape(r, k)),
                    rank=r,
                    alpha=float(layer["alpha"]),
                )
            )
        adapter = AdapterSet(
            adapter_id=entry["adapter_id"],
            layers=tuple(pairs),
            metadata=entry.get("adapter_metadata", {}),
        )
        covariance = entry.get("covariance")
        records.append(
            DomainRecord(
                domain_id=entry["domain_id"],
                centroid=Embedding(np.asarray(entry["centroid"], dtype=np.float64)),
                sample_count=entry["sample_count"],
                adapter=adapter,
                covariance=None if covariance is None else Matrix(covariance),
                metadata=entry.get("metadata", {}),
            )
        )
    return Library(
        records=tuple(records),
        embedding_dim=manifest["embedding_dim"],
        format_version=version,
    )


# ---------------------------------------------------------------------------
# Embedding ingestion: plain text, one file per domain.
# ---------------------------------------------------------------------------


def read_embeddings_file(path: str | Path, normalize: bool = False) -> list[Embedding]:
    """Parse the `dim N` header format; blank lines and # comments allowed."""
    lines = _data_lines(Path(path).read_text(encoding="utf-8"))
    if not lines:
        raise StructuralError(f"{path}: empty embedding file")
    header = lines[0].split()
    if len(header) != 2:
        raise StructuralError(f"{path}: header must be 'dim N', got {lines[0]!r}")
    try:
        dim, count = int(header[0]), int(header[1])
    except ValueError as exc:
        raise StructuralError(f"{path}: non-integer header {lines[0]!r}") from exc
    if dim < 1 or count < 0:
        raise StructuralError(f"{path}: bad header values dim={dim} N={count}")
    body = lines[1:]
    if len(body) != count:
        raise StructuralError(
            f"{path}: header promises {count} embeddings, found {len(body)}"
        )
    out = []
    for i, line in enumerate(body):
        parts = line.split()
        if len(parts) != dim:
            raise StructuralError(
                f"{path}: line {i + 1} has {len(parts)} values, expected {dim}"
            )
        try:
            vec = np.array([float(p) for p in parts], dtype=np.float64)
        except ValueError as exc:
            raise StructuralError(f"{path}: line {i + 1} is not numeric") from exc
        if normalize:
            norm = float(np.linalg.norm(vec))
            if norm == 0.0:
                raise NumericError(f"{path}: line {i + 1} cannot be normalized")
            vec = vec / norm
        out.append(Embedding(vec))
    return out


def write_embeddings_file(path: str | Path, embeddings: Iterable[Embedding]) -> None:
    """Emit the same `dim N` format ingestion reads."""
    embeddings = list(embeddings)
    if not embeddings:
        raise UsageError("refusing to write an empty embedding file")
    dim = embeddings[0].dim
    rows = [f"{dim} {len(embeddings)}"]
    for e in embeddings:
        if e.dim != dim:
            raise StructuralError(f"mixed embedding dims: {dim} vs {e.dim}")
        rows.append(" ".join(repr(float(v)) for v in e.values))
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def _data_lines(text: str) -> list[str]:
    out = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        out.append(line)
    return out
