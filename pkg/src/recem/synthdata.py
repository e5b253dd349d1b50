"""Synthetic concept data with a spurious, label-correlated background factor.

Each sample has binary concepts c, a concept-relevant latent r = R c + noise
and a background latent z that, with probability ``rho``, is the anchor of
the sample's class and otherwise standard normal. Features mix both:
x = A r + B z + eps. Test-time shifts rebuild x with a replaced z.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .nn import philox

MAGIC = b"RECEMDATA v1\n"


class FormatError(ValueError):
    pass


class LabelAccessError(RuntimeError):
    pass


class ShiftKind(str, Enum):
    IN_DISTRIBUTION = "InDistribution"
    RANDOM = "RandomShift"
    FIXED = "FixedShift"
    ZERO = "ZeroShift"


@dataclass(frozen=True)
class SyntheticSpec:
    K: int = 16
    M: int = 8
    n_in: int = 64
    dim_r: int = 32
    dim_z: int = 16
    rho: float = 0.9
    noise_sigma: float = 0.05
    concept_noise: float = 0.5
    anchor_scale: float = 1.0
    pair_corr: float = 0.3
    incomplete: bool = False
    n_train: int = 4000
    n_val: int = 1000
    n_test: int = 2000
    seed: int = 0

    def validate(self) -> None:
        if self.K < 1 or self.M < 2:
            raise ValueError("need K >= 1 concepts and M >= 2 classes")
        bits = int(round(math.log2(self.M)))
        if 2 ** bits != self.M:
            raise ValueError("M must be a power of two (labels encode concept bits)")
        if bits > self.K:
            raise ValueError("M must not exceed 2^K")
        if self.n_in < self.dim_r + self.dim_z:
            raise ValueError("n_in must be at least dim_r + dim_z")
        if min(self.dim_r, self.dim_z) < 1:
            raise ValueError("latent dims must be positive")
        if not 0 <= self.rho <= 1 or not 0 <= self.pair_corr <= 1:
            raise ValueError("rho and pair_corr must lie in [0, 1]")
        if self.noise_sigma < 0 or self.concept_noise < 0 or self.anchor_scale <= 0:
            raise ValueError("noise levels must be non-negative, anchor scale positive")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("split sizes must be positive")

    @property
    def label_bits(self) -> int:
        return int(round(math.log2(self.M)))

    def items(self) -> list[tuple[str, str]]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append((f.name, ("true" if v else "false") if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)))
        return out

    def fingerprint(self) -> str:
        text = ";".join(f"{k}={v}" for k, v in self.items())
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class SynDataset:
    features: np.ndarray  # [N, n_in] float64
    _concepts: np.ndarray  # [N, K] uint8
    _labels: np.ndarray  # [N] int64
    r: np.ndarray
    z: np.ndarray
    eps: np.ndarray
    A: np.ndarray
    B: np.ndarray
    anchors: np.ndarray  # [M, dim_z]
    spec: SyntheticSpec
    split: str = "train"
    shift: ShiftKind = ShiftKind.IN_DISTRIBUTION
    locked: bool = False

    @property
    def concepts(self) -> np.ndarray:
        if self.locked:
            raise LabelAccessError(f"concept labels of the locked {self.split} split were accessed")
        return self._concepts

    @property
    def labels(self) -> np.ndarray:
        if self.locked:
            raise LabelAccessError(f"task labels of the locked {self.split} split were accessed")
        return self._labels

    def __len__(self) -> int:
        return self.features.shape[0]

    def lock(self) -> "SynDataset":
        return replace(self, locked=True)

    def unlock(self) -> "SynDataset":
        return replace(self, locked=False)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.features, self._concepts, self._labels, self.r, self.z, self.eps):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def label_rule(concepts: np.ndarray, M: int) -> np.ndarray:
    """Class index = first log2(M) concepts read as a base-2 number (first is MSB)."""
    bits = int(round(math.log2(M)))
    c = np.asarray(concepts)[:, :bits].astype(np.int64)
    weights = 2 ** np.arange(bits - 1, -1, -1)
    return c @ weights


def _mixing(spec: SyntheticSpec):
    rng = philox(spec.seed, "mixing")
    n_latent = spec.K + (1 if spec.incomplete else 0)
    R = rng.standard_normal((spec.dim_r, n_latent)) / math.sqrt(n_latent) * 2.0
    A = rng.standard_normal((spec.n_in, spec.dim_r)) / math.sqrt(spec.dim_r)
    B = rng.standard_normal((spec.n_in, spec.dim_z)) / math.sqrt(spec.dim_z)
    if spec.dim_z >= spec.M:
        anchors = np.eye(spec.M, spec.dim_z)
    else:
        anchors = rng.standard_normal((spec.M, spec.dim_z))
        anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
    return R, A, B, anchors * spec.anchor_scale


def _draw_concepts(spec: SyntheticSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    n_latent = spec.K + (1 if spec.incomplete else 0)
    c = (rng.random((n, n_latent)) < 0.5).astype(np.uint8)
    # pairs (2j, 2j+1), j < K//4, share a coin: the second copies the first w.p. pair_corr
    for j in range(spec.K // 4):
        a, b = 2 * j, 2 * j + 1
        if b >= spec.K:
            break
        copy = rng.random(n) < spec.pair_corr
        c[copy, b] = c[copy, a]
    return c


def _labels_from(spec: SyntheticSpec, latent_c: np.ndarray) -> np.ndarray:
    if not spec.incomplete:
        return label_rule(latent_c[:, :spec.K], spec.M)
    bits = spec.label_bits
    used = np.concatenate([latent_c[:, :bits - 1], latent_c[:, spec.K:spec.K + 1]], axis=1)
    return label_rule(used, spec.M)


def _make_split(spec: SyntheticSpec, name: str, n: int, mixing) -> SynDataset:
    R, A, B, anchors = mixing
    rng = philox(spec.seed, "split", name)
    latent_c = _draw_concepts(spec, rng, n)
    y = _labels_from(spec, latent_c)
    r = latent_c.astype(np.float64) @ R.T + spec.concept_noise * rng.standard_normal((n, spec.dim_r))
    spurious = rng.random(n) < spec.rho
    z = rng.standard_normal((n, spec.dim_z))
    z[spurious] = anchors[y[spurious]]
    eps = spec.noise_sigma * rng.standard_normal((n, spec.n_in))
    x = r @ A.T + z @ B.T + eps
    return SynDataset(features=x, _concepts=latent_c[:, :spec.K].copy(), _labels=y, r=r, z=z, eps=eps,
                      A=A, B=B, anchors=anchors, spec=spec, split=name)


def generate(spec: SyntheticSpec) -> tuple[SynDataset, SynDataset, SynDataset]:
    spec.validate()
    mixing = _mixing(spec)
    return (_make_split(spec, "train", spec.n_train, mixing),
            _make_split(spec, "val", spec.n_val, mixing),
            _make_split(spec, "test", spec.n_test, mixing))


def derangement(M: int, seed: int) -> np.ndarray:
    """Random permutation of range(M) with no fixed point."""
    if M < 2:
        raise ValueError("a derangement needs at least 2 classes")
    rng = philox(seed, "derangement")
    while True:
        perm = rng.permutation(M)
        if np.all(perm != np.arange(M)):
            return perm


def apply_shift(ds: SynDataset, kind: ShiftKind | str, seed: int = 0) -> SynDataset:
    """Rebuild features with the background replaced; concepts and labels stay."""
    kind = ShiftKind(kind)
    if ds.r is None or ds.z is None or ds.eps is None:
        raise FormatError("dataset carries no latents to shift")
    if kind is ShiftKind.IN_DISTRIBUTION:
        return replace(ds, shift=kind)
    n = len(ds)
    if kind is ShiftKind.RANDOM:
        z_new = philox(seed, "shift", "random").standard_normal((n, ds.z.shape[1]))
    elif kind is ShiftKind.FIXED:
        perm = derangement(ds.spec.M, seed)
        z_new = ds.anchors[perm[ds._labels]]
    else:
        z_new = np.zeros_like(ds.z)
    x = ds.r @ ds.A.T + z_new @ ds.B.T + ds.eps
    return replace(ds, features=x, z=z_new, shift=kind)


# -- file format ---------------------------------------------------------------------


def _header(ds: SynDataset) -> bytes:
    meta = ds.spec.items() + [("split", ds.split), ("shift", ds.shift.value), ("n", str(len(ds)))]
    return (";".join(f"{k}={v}" for k, v in meta) + "\n").encode()


_BLOCKS = ("features", "_concepts", "_labels", "r", "z", "eps", "A", "B", "anchors")


def _block_layout(spec: SyntheticSpec, n: int):
    return [
        ("features", "<f8", (n, spec.n_in)),
        ("_concepts", "u1", (n, spec.K)),
        ("_labels", "<u4", (n,)),
        ("r", "<f8", (n, spec.dim_r)),
        ("z", "<f8", (n, spec.dim_z)),
        ("eps", "<f8", (n, spec.n_in)),
        ("A", "<f8", (spec.n_in, spec.dim_r)),
        ("B", "<f8", (spec.n_in, spec.dim_z)),
        ("anchors", "<f8", (spec.M, spec.dim_z)),
    ]


def save(ds: SynDataset, path: str | Path) -> None:
    layout = _block_layout(ds.spec, len(ds))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_header(ds))
        for name, dtype, shape in layout:
            arr = np.ascontiguousarray(getattr(ds, name), dtype=dtype)
            if arr.shape != shape:
                raise FormatError(f"block {name} has shape {arr.shape}, expected {shape}")
            fh.write(arr.tobytes())


def _parse_spec(meta: dict[str, str]) -> SyntheticSpec:
    kwargs = {}
    for f in fields(SyntheticSpec):
        if f.name not in meta:
            raise FormatError(f"header lacks field {f.name}")
        raw = meta[f.name]
        kwargs[f.name] = (raw == "true") if f.type in (bool, "bool") else (
            float(raw) if f.type in (float, "float") else int(raw))
    return SyntheticSpec(**kwargs)


def load(path: str | Path) -> SynDataset:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise FormatError("missing 'RECEMDATA v1' header (wrong file or version)")
    nl = blob.find(b"\n", len(MAGIC))
    if nl < 0:
        raise FormatError("truncated header")
    try:
        meta = dict(item.split("=", 1) for item in blob[len(MAGIC):nl].decode().split(";"))
        spec = _parse_spec(meta)
        n = int(meta["n"])
        split, shift = meta["split"], ShiftKind(meta["shift"])
    except (ValueError, KeyError) as exc:
        raise FormatError(f"bad header: {exc}") from exc
    layout = _block_layout(spec, n)
    need = sum(int(np.prod(shape)) * np.dtype(dt).itemsize for _, dt, shape in layout)
    body = blob[nl + 1:]
    if len(body) != need:
        raise FormatError(f"body has {len(body)} bytes, expected {need} (truncated or corrupt)")
    arrays = {}
    off = 0
    for name, dt, shape in layout:
        size = int(np.prod(shape)) * np.dtype(dt).itemsize
        arrays[name] = np.frombuffer(body, dtype=dt, count=int(np.prod(shape)), offset=off).reshape(shape).copy()
        off += size
    arrays["features"] = arrays["features"].astype(np.float64)
    arrays["_labels"] = arrays["_labels"].astype(np.int64)
    return SynDataset(**arrays, spec=spec, split=split, shift=shift)
