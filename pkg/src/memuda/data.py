"""Synthetic multi-camera domains and the binary dataset file format.

A domain has ``num_identities`` random unit prototypes. Each sample draws an
identity latent ``prototype + spread * noise`` and is observed through its
camera's fixed linear map ``I + camera_strength * R_c``. Target domains also
pass every observation through a global shift map ``I + shift_strength * S``.
``R_c``, ``S`` and the noise have standard normal entries.

Prototypes are unit vectors drawn uniformly inside a random
``identity_rank``-dimensional subspace. The subspace comes from
``world_seed``, not ``seed``, so domains sharing a world share the directions
that carry identity while differing in identities, cameras and shift. This is
what makes a metric learned on one domain (or on some identities) useful on
another; with ``identity_rank == in_dim`` the prototypes are isotropic and a
learned embedding cannot beat the raw input.

Style counterparts re-observe a stored latent through another camera's map,
so they keep the identity exactly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import InvalidParameterError, l2_normalize

DATASET_MAGIC = b"IMDA1"
_HEADER = struct.Struct("<IIH")


@dataclass(frozen=True)
class DomainSpec:
    num_identities: int = 50
    samples_per_identity: int = 12
    num_cameras: int = 4
    in_dim: int = 32
    cluster_spread: float = 0.15
    camera_strength: float = 0.2
    shift_strength: float = 0.3
    seed: int = 0
    label_offset: int = 0
    identity_rank: int = 8
    world_seed: int = 0

    def validate(self) -> None:
        for name in ("num_identities", "samples_per_identity", "num_cameras", "in_dim"):
            if getattr(self, name) < 1:
                raise InvalidParameterError(f"{name} must be >= 1")
        for name in ("cluster_spread", "camera_strength", "shift_strength"):
            if getattr(self, name) < 0:
                raise InvalidParameterError(f"{name} must be >= 0")
        if not 1 <= self.identity_rank <= self.in_dim:
            raise InvalidParameterError("identity_rank must lie in [1, in_dim]")
        if self.label_offset < 0:
            raise InvalidParameterError("label_offset must be >= 0")


@dataclass
class Sample:
    x: np.ndarray
    identity: int
    camera: int
    domain: str
    counterpart_of: int | None = None


@dataclass
class DomainData:
    """Column arrays for one domain (or split). Row ``r`` with
    ``counterpart_of[r] >= 0`` is a style counterpart of row ``counterpart_of[r]``."""

    x: np.ndarray
    identity: np.ndarray
    camera: np.ndarray
    counterpart_of: np.ndarray
    num_cameras: int
    domain: str = "source"
    latent: np.ndarray | None = None
    camera_maps: np.ndarray | None = field(default=None, repr=False)
    shift_map: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def in_dim(self) -> int:
        return self.x.shape[1]

    @property
    def real_mask(self) -> np.ndarray:
        return self.counterpart_of < 0

    def sample(self, r: int) -> Sample:
        c = int(self.counterpart_of[r])
        return Sample(self.x[r], int(self.identity[r]), int(self.camera[r]), self.domain,
                      None if c < 0 else c)

    def subset(self, rows) -> "DomainData":
        """Rows as a new table; counterpart links are remapped (dropped if the
        original is not included)."""
        rows = np.asarray(rows, dtype=np.int64)
        remap = np.full(len(self), -1, dtype=np.int64)
        remap[rows] = np.arange(rows.size)
        cp = self.counterpart_of[rows]
        cp = np.where(cp >= 0, remap[np.maximum(cp, 0)], -1)
        return replace(self, x=self.x[rows], identity=self.identity[rows], camera=self.camera[rows],
                       counterpart_of=cp,
                       latent=None if self.latent is None else self.latent[rows])

    def real(self) -> "DomainData":
        return self.subset(np.flatnonzero(self.real_mask))

    def counterpart_table(self) -> list[np.ndarray]:
        """For each real row (in real-row order), the rows of its counterparts."""
        real_rows = np.flatnonzero(self.real_mask)
        pos = np.full(len(self), -1, dtype=np.int64)
        pos[real_rows] = np.arange(real_rows.size)
        table = [[] for _ in real_rows]
        for r in np.flatnonzero(~self.real_mask):
            table[pos[self.counterpart_of[r]]].append(r)
        return [np.asarray(t, dtype=np.int64) for t in table]


def _observe(latent, cameras, camera_maps, shift_map):
    x = np.einsum("nij,nj->ni", camera_maps[cameras], latent)
    if shift_map is not None:
        x = x @ shift_map.T
    return x


def generate_domain(spec: DomainSpec, domain: str = "source") -> DomainData:
    spec.validate()
    if domain not in ("source", "target"):
        raise InvalidParameterError(f"domain must be 'source' or 'target', got {domain!r}")
    rng = np.random.default_rng(spec.seed)
    m, s, c, dim = spec.num_identities, spec.samples_per_identity, spec.num_cameras, spec.in_dim
    basis = np.linalg.qr(np.random.default_rng(spec.world_seed).standard_normal((dim, spec.identity_rank)))[0]
    prototypes = l2_normalize(rng.standard_normal((m, spec.identity_rank)) @ basis.T)
    eye = np.eye(dim)
    camera_maps = eye + spec.camera_strength * rng.standard_normal((c, dim, dim))
    shift_noise = rng.standard_normal((dim, dim))
    shift_map = eye + spec.shift_strength * shift_noise if domain == "target" else None
    identity = np.repeat(np.arange(m), s)
    camera = np.tile(np.arange(s) % c, m)
    latent = prototypes[identity] + spec.cluster_spread * rng.standard_normal((m * s, dim))
    x = _observe(latent, camera, camera_maps, shift_map)
    return DomainData(
        x=x,
        identity=identity.astype(np.int64) + spec.label_offset,
        camera=camera.astype(np.int64),
        counterpart_of=np.full(m * s, -1, dtype=np.int64),
        num_cameras=c,
        domain=domain,
        latent=latent,
        camera_maps=camera_maps,
        shift_map=shift_map,
    )


def _other_cameras(cam: int, c: int, how_many: int):
    return [(cam + j) % c for j in range(1, how_many + 1)]


def camstyle_counterparts(data: DomainData, index: int, how_many: int) -> list[Sample]:
    """Re-render real sample ``index`` under the next ``how_many`` cameras."""
    c = data.num_cameras
    if not 0 <= how_many <= c - 1:
        raise InvalidParameterError(f"at most {c - 1} counterparts exist with {c} cameras, asked {how_many}")
    if data.latent is None or data.camera_maps is None:
        raise InvalidParameterError("counterparts need the generating latents and camera maps")
    cams = _other_cameras(int(data.camera[index]), c, how_many)
    lat = np.repeat(data.latent[index][None], len(cams), axis=0)
    xs = _observe(lat, np.asarray(cams), data.camera_maps, data.shift_map)
    return [Sample(xs[j], int(data.identity[index]), cams[j], data.domain, int(index))
            for j in range(len(cams))]


def with_counterparts(data: DomainData, how_many: int) -> DomainData:
    """Real rows followed by ``how_many`` counterparts of each real row."""
    real = data.real()
    c = real.num_cameras
    if not 0 <= how_many <= c - 1:
        raise InvalidParameterError(f"at most {c - 1} counterparts exist with {c} cameras, asked {how_many}")
    if how_many == 0:
        return real
    n = len(real)
    src = np.repeat(np.arange(n), how_many)
    cams = np.array([cam for r in range(n) for cam in _other_cameras(int(real.camera[r]), c, how_many)],
                    dtype=np.int64)
    xs = _observe(real.latent[src], cams, real.camera_maps, real.shift_map)
    return replace(
        real,
        x=np.concatenate([real.x, xs]),
        identity=np.concatenate([real.identity, real.identity[src]]),
        camera=np.concatenate([real.camera, cams]),
        counterpart_of=np.concatenate([real.counterpart_of, src]),
        latent=np.concatenate([real.latent, real.latent[src]]),
    )


def split_identities(data: DomainData, test_fraction: float = 0.3):
    """Hold out the last ``round(test_fraction * M)`` identities (by label) as a test split."""
    if not 0.0 < test_fraction < 1.0:
        raise InvalidParameterError("test_fraction must lie in (0, 1)")
    ids = np.unique(data.identity)
    n_test = int(round(test_fraction * ids.size))
    n_test = min(max(n_test, 1), ids.size - 1)
    test_ids = ids[ids.size - n_test:]
    is_test = np.isin(data.identity, test_ids)
    return data.subset(np.flatnonzero(~is_test)), data.subset(np.flatnonzero(is_test))


def query_mask(data: DomainData) -> np.ndarray:
    """First occurrence of each (identity, camera) pair in row order is a query."""
    seen = set()
    mask = np.zeros(len(data), dtype=bool)
    for r in range(len(data)):
        key = (int(data.identity[r]), int(data.camera[r]))
        if key not in seen:
            seen.add(key)
            mask[r] = True
    return mask


# ------------------------------------------------------------------ file IO

def _record_dtype(in_dim: int) -> np.dtype:
    return np.dtype([("x", "<f8", (in_dim,)), ("identity", "<u4"),
                     ("camera", "<u2"), ("counterpart_of", "<i4")])


def dataset_bytes(data: DomainData) -> bytes:
    rec = np.zeros(len(data), dtype=_record_dtype(data.in_dim))
    rec["x"] = data.x
    rec["identity"] = data.identity
    rec["camera"] = data.camera
    rec["counterpart_of"] = data.counterpart_of
    return DATASET_MAGIC + _HEADER.pack(data.in_dim, len(data), data.num_cameras) + rec.tobytes()


def save_dataset(path, data: DomainData) -> None:
    Path(path).write_bytes(dataset_bytes(data))


def parse_dataset(raw: bytes, domain: str = "source") -> DomainData:
    if raw[:5] != DATASET_MAGIC:
        raise ValueError("not a dataset file (bad magic)")
    in_dim, count, c = _HEADER.unpack_from(raw, 5)
    dt = _record_dtype(in_dim)
    body = raw[5 + _HEADER.size:]
    if len(body) != count * dt.itemsize:
        raise ValueError(f"expected {count * dt.itemsize} record bytes, found {len(body)}")
    rec = np.frombuffer(body, dtype=dt)
    return DomainData(
        x=rec["x"].astype(np.float64),
        identity=rec["identity"].astype(np.int64),
        camera=rec["camera"].astype(np.int64),
        counterpart_of=rec["counterpart_of"].astype(np.int64),
        num_cameras=int(c),
        domain=domain,
    )


def load_dataset(path, domain: str = "source") -> DomainData:
    return parse_dataset(Path(path).read_bytes(), domain)
