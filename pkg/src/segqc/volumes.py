"""Domain types for label volumes, structure registries, and MC sample sets.

All types are immutable after construction. Construction is deliberately
tolerant for sample sets: consistency rules are checked by
:func:`validate_sample_set`, which reports violations instead of raising,
so that broken inputs can be diagnosed file by file. Metric operations
refuse to run on an invalid set.

Voxel data is stored as 3-D numpy arrays indexed ``[x, y, z]``; the flat
(serialized) order is x-fastest, matching the on-disk layout used by the
io module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Tolerance on per-voxel probability sums: generous enough for float32
# sums over a few dozen maps, far below any real segmentation difference.
PROB_SUM_TOL = 1e-4


class ValidationError(ValueError):
    """An input violates a structural invariant."""


@dataclass(frozen=True)
class VoxelGeometry:
    """Grid shape and physical voxel size of a volume.

    dims    -- voxels per axis (x, y, z)
    spacing -- millimetres per voxel along each axis
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.dims) != 3 or len(self.spacing) != 3:
            raise ValidationError("geometry needs exactly 3 dims and 3 spacings")
        if any(d < 1 for d in self.dims):
            raise ValidationError(f"all dims must be >= 1, got {self.dims}")
        if any(not np.isfinite(s) or s <= 0 for s in self.spacing):
            raise ValidationError(f"all spacings must be positive and finite, got {self.spacing}")

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def voxel_volume(self) -> float:
        """Volume of one voxel in mm^3."""
        return self.spacing[0] * self.spacing[1] * self.spacing[2]


@dataclass(frozen=True)
class StructureRegistry:
    """Ordered map of label ids to structure names.

    The background label is a registry entry like any other but is excluded
    from all structure-wise metrics.
    """

    entries: tuple[tuple[int, str], ...]
    background_id: int

    def __post_init__(self):
        object.__setattr__(
            self, "entries", tuple((int(i), str(n)) for i, n in self.entries)
        )
        ids = [i for i, _ in self.entries]
        names = [n for _, n in self.entries]
        if any(i < 0 for i in ids):
            raise ValidationError("label ids must be non-negative")
        if len(set(ids)) != len(ids):
            raise ValidationError("label ids must be unique")
        if len(set(names)) != len(names):
            raise ValidationError("structure names must be unique")
        if self.background_id not in ids:
            raise ValidationError(f"background id {self.background_id} missing from entries")
        if len(ids) < 2:
            raise ValidationError("registry needs at least one non-background structure")

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(i for i, _ in self.entries)

    @property
    def foreground(self) -> tuple[tuple[int, str], ...]:
        """Entries excluding background, in registry order."""
        return tuple((i, n) for i, n in self.entries if i != self.background_id)

    @property
    def max_id(self) -> int:
        return max(self.ids)

    def name_of(self, label_id: int) -> str:
        for i, n in self.entries:
            if i == label_id:
                return n
        raise KeyError(f"label id {label_id} not in registry")

    def __contains__(self, label_id: int) -> bool:
        return label_id in self.ids


@dataclass(frozen=True)
class LabelVolume:
    """Dense 3-D map of integer label ids."""

    geometry: VoxelGeometry
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValidationError(f"label data must be integer, got dtype {arr.dtype}")
        if arr.shape != self.geometry.dims:
            raise ValidationError(
                f"label data shape {arr.shape} does not match dims {self.geometry.dims}"
            )
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def flat(self) -> np.ndarray:
        """Label ids in serialized (x-fastest) order."""
        return self.data.reshape(-1, order="F")

    def check_labels(self, registry: StructureRegistry) -> list[int]:
        """Label ids present in the volume but absent from the registry."""
        present = np.unique(self.data)
        known = set(registry.ids)
        return [int(v) for v in present if int(v) not in known]


@dataclass(frozen=True)
class ProbMapStack:
    """Per-structure probability volumes for one MC sample.

    ``maps[k]`` is the probability volume for ``label_ids[k]``; the stack
    covers every registry entry, background included. Per voxel the maps
    are expected to sum to 1 within PROB_SUM_TOL -- checked by
    :meth:`violations`, not at construction.
    """

    geometry: VoxelGeometry
    label_ids: tuple[int, ...]
    maps: np.ndarray = field(repr=False)  # shape (n_labels, *dims)

    def __post_init__(self):
        arr = np.asarray(self.maps)
        if arr.ndim != 4 or arr.shape[0] != len(self.label_ids):
            raise ValidationError(
                f"expected maps of shape (n_labels, x, y, z), got {arr.shape} "
                f"for {len(self.label_ids)} labels"
            )
        if arr.shape[1:] != self.geometry.dims:
            raise ValidationError(
                f"map shape {arr.shape[1:]} does not match dims {self.geometry.dims}"
            )
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "maps", arr)
        object.__setattr__(self, "label_ids", tuple(int(i) for i in self.label_ids))

    def violations(self, sum_tol: float = PROB_SUM_TOL) -> list[str]:
        """Rule violations in this stack; empty list means valid."""
        out = []
        if not np.all(np.isfinite(self.maps)):
            out.append("probability maps contain non-finite values")
        else:
            lo, hi = float(self.maps.min()), float(self.maps.max())
            if lo < 0.0 or hi > 1.0:
                out.append(f"probability values outside [0, 1] (range {lo:g}..{hi:g})")
            total = self.maps.sum(axis=0, dtype=np.float64)
            err = float(np.abs(total - 1.0).max())
            if err > sum_tol:
                out.append(
                    f"per-voxel probability sums deviate from 1 by up to {err:g} "
                    f"(tolerance {sum_tol:g})"
                )
        return out

    def argmax_labels(self) -> np.ndarray:
        """Most probable label per voxel; ties go to the lowest label id."""
        order = np.argsort(self.label_ids, kind="stable")
        ids = np.asarray(self.label_ids, dtype=np.int64)[order]
        idx = np.argmax(self.maps[order], axis=0)
        return ids[idx]


@dataclass(frozen=True)
class McSample:
    """One MC segmentation sample: labels, probability maps, or both."""

    labels: LabelVolume | None = None
    probs: ProbMapStack | None = None

    def __post_init__(self):
        if self.labels is None and self.probs is None:
            raise ValidationError("a sample needs labels, probability maps, or both")

    @property
    def kind(self) -> str:
        if self.labels is not None and self.probs is not None:
            return "both"
        return "labels" if self.labels is not None else "probs"


@dataclass(frozen=True)
class McSampleSet:
    """Ordered collection of MC samples sharing one grid and registry."""

    geometry: VoxelGeometry
    registry: StructureRegistry
    samples: tuple[McSample, ...]

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if not self.samples:
            raise ValidationError("sample set must contain at least one sample")

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def kind(self) -> str:
        return self.samples[0].kind

    def sample_labels(self, i: int) -> np.ndarray:
        """Label array for sample ``i`` (argmax of its maps if label-free)."""
        s = self.samples[i]
        if s.labels is not None:
            return s.labels.data
        return s.probs.argmax_labels()


@dataclass(frozen=True)
class Violation:
    """One broken rule found while validating a sample set."""

    rule: str
    message: str
    sample_index: int | None = None

    def __str__(self) -> str:
        where = "set" if self.sample_index is None else f"sample {self.sample_index}"
        return f"[{self.rule}] {where}: {self.message}"


def validate_sample_set(sample_set: McSampleSet) -> list[Violation]:
    """Check every sample-set invariant; returns one Violation per breach.

    Pure and side-effect free: repeated calls on the same set yield the
    same report. An empty report means the set is safe for all metric
    operations.
    """
    out: list[Violation] = []
    if sample_set.n < 2:
        out.append(Violation("sample_count", f"need N >= 2 samples, got {sample_set.n}"))

    kinds = {s.kind for s in sample_set.samples}
    if len(kinds) > 1:
        out.append(
            Violation("sample_kind", f"mixed sample kinds {sorted(kinds)}; must be homogeneous")
        )

    registry_ids = tuple(sample_set.registry.ids)
    for i, s in enumerate(sample_set.samples):
        if s.labels is not None:
            if s.labels.geometry != sample_set.geometry:
                out.append(
                    Violation(
                        "geometry",
                        f"label dims {s.labels.geometry.dims} spacing "
                        f"{s.labels.geometry.spacing} do not match set geometry "
                        f"{sample_set.geometry.dims} {sample_set.geometry.spacing}",
                        i,
                    )
                )
            else:
                unknown = s.labels.check_labels(sample_set.registry)
                if unknown:
                    out.append(
                        Violation("labels", f"label ids {unknown} not in registry", i)
                    )
        if s.probs is not None:
            if s.probs.geometry != sample_set.geometry:
                out.append(
                    Violation(
                        "geometry",
                        f"probability map dims {s.probs.geometry.dims} do not match "
                        f"set geometry {sample_set.geometry.dims}",
                        i,
                    )
                )
            if s.probs.label_ids != registry_ids:
                out.append(
                    Violation(
                        "prob_labels",
                        "probability stack labels do not match the registry "
                        f"({s.probs.label_ids} vs {registry_ids})",
                        i,
                    )
                )
            for msg in s.probs.violations():
                out.append(Violation("prob_normalization", msg, i))
    return out


def require_valid(sample_set: McSampleSet) -> None:
    """Raise ValidationError with the full report if the set is invalid."""
    report = validate_sample_set(sample_set)
    if report:
        raise ValidationError("; ".join(str(v) for v in report))


def labels_to_onehot_probs(volume: LabelVolume, registry: StructureRegistry) -> ProbMapStack:
    """Indicator probability maps for a label volume.

    Each registry entry gets a map that is 1.0 where the volume carries
    that label and 0.0 elsewhere, so per-voxel sums are exactly 1.
    """
    unknown = volume.check_labels(registry)
    if unknown:
        raise ValidationError(f"label ids {unknown} not in registry")
    ids = registry.ids
    maps = np.zeros((len(ids),) + volume.geometry.dims, dtype=np.float64)
    for k, label_id in enumerate(ids):
        maps[k] = volume.data == label_id
    return ProbMapStack(geometry=volume.geometry, label_ids=ids, maps=maps)


def structure_volume(
    volume: LabelVolume, label_id: int, registry: StructureRegistry
) -> float:
    """Volume of one structure in mm^3 (voxel count times voxel volume)."""
    if label_id not in registry:
        raise ValidationError(f"label id {label_id} not in registry")
    count = int(np.count_nonzero(volume.data == label_id))
    return count * volume.geometry.voxel_volume
