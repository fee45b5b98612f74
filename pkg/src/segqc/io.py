"""Table, registry, report, and config serialization.

Everything here is strict and deterministic: JSON uses shortest
round-trip float formatting (the json module's repr-based default),
CSV parsing names the offending line and column, and readers ignore
unknown JSON fields so report schemas can grow without breaking old
consumers. Volume I/O lives in :mod:`segqc.nifti`; this module adds the
structured-text side plus the metric heat-map writer.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import StructureMetrics, StructureReport
from .nifti import write_nifti
from .stats import CohortTable
from .synth import NoiseSpec, PhantomSpec, ShapeSpec
from .volumes import (
    LabelVolume,
    McSample,
    McSampleSet,
    ProbMapStack,
    StructureRegistry,
    ValidationError,
    VoxelGeometry,
)

REPORT_SCHEMA_VERSION = "1"
HEATMAP_METRICS = ("mc_dice", "cv", "mean_unc")

COHORT_REQUIRED = ("subject_id", "age", "sex", "dx", "volume")
COHORT_OPTIONAL = ("site", "cv", "mc_dice")


def _load_json(path: str | Path) -> object:
    # OSError propagates: missing/unreadable files are I/O errors, not format errors
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}") from exc


def _dump_json(obj: object, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


# -- structure registry ------------------------------------------------------


def read_registry(path: str | Path) -> StructureRegistry:
    """Registry JSON: {"background": id, "structures": [{"id", "name"}, ...]}.

    The background entry itself may be listed under "structures"; if not,
    it is added with the name "background".
    """
    doc = _load_json(path)
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: registry must be a JSON object")
    if "background" not in doc:
        raise ValidationError(f"{path}: registry is missing the \"background\" id")
    background = doc["background"]
    if not isinstance(background, int) or isinstance(background, bool):
        raise ValidationError(f"{path}: \"background\" must be an integer label id")
    raw = doc.get("structures")
    if not isinstance(raw, list):
        raise ValidationError(f"{path}: \"structures\" must be a JSON array")
    entries = []
    for k, item in enumerate(raw):
        if not isinstance(item, dict) or "id" not in item or "name" not in item:
            raise ValidationError(
                f"{path}: structures[{k}] must be an object with \"id\" and \"name\""
            )
        lid, name = item["id"], item["name"]
        if not isinstance(lid, int) or isinstance(lid, bool):
            raise ValidationError(f"{path}: structures[{k}].id must be an integer")
        if not isinstance(name, str):
            raise ValidationError(f"{path}: structures[{k}].name must be a string")
        entries.append((lid, name))
    if background not in [i for i, _ in entries]:
        entries.insert(0, (background, "background"))
    return StructureRegistry(entries=tuple(entries), background_id=background)


def write_registry(registry: StructureRegistry, path: str | Path) -> None:
    doc = {
        "background": registry.background_id,
        "structures": [{"id": i, "name": n} for i, n in registry.entries],
    }
    _dump_json(doc, path)


# -- cohort CSV --------------------------------------------------------------


def _parse_float(text: str, line: int, column: str, path) -> float:
    try:
        return float(text)
    except ValueError:
        raise ValidationError(
            f"{path}: line {line}, column {column}: cannot parse {text!r} as a number"
        ) from None


def read_cohort_csv(path: str | Path) -> CohortTable:
    """Cohort CSV with header subject_id, age, sex, dx, site?, volume, cv?, mc_dice?.

    UTF-8, '.' decimal separator. Optional numeric cells may be empty
    (missing weight); required cells may not. Any unparsable numeric cell
    is an error naming its line number and column.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ValidationError(f"{path} is not valid UTF-8: {exc}") from exc
    rows = list(csv.reader(text.splitlines()))
    if not rows:
        raise ValidationError(f"{path}: empty file, expected a header row")
    header = [h.strip() for h in rows[0]]
    known = set(COHORT_REQUIRED) | set(COHORT_OPTIONAL)
    for col in COHORT_REQUIRED:
        if col not in header:
            raise ValidationError(f"{path}: header is missing required column {col}")
    unknown = [h for h in header if h not in known]
    if unknown:
        raise ValidationError(f"{path}: unknown columns {unknown}")
    if len(set(header)) != len(header):
        raise ValidationError(f"{path}: duplicate columns in header")
    idx = {h: k for k, h in enumerate(header)}

    cols: dict[str, list] = {h: [] for h in header}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue  # blank line
        if len(row) != len(header):
            raise ValidationError(
                f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}"
            )
        for h in header:
            cell = row[idx[h]].strip()
            if h in ("subject_id", "site"):
                cols[h].append(cell)
            elif cell == "" and h in ("cv", "mc_dice"):
                cols[h].append(math.nan)
            elif cell == "":
                raise ValidationError(
                    f"{path}: line {lineno}, column {h}: required value is empty"
                )
            else:
                cols[h].append(_parse_float(cell, lineno, h, path))
    if not cols["subject_id"]:
        raise ValidationError(f"{path}: no data rows")
    return CohortTable(
        subject_ids=tuple(cols["subject_id"]),
        age=np.array(cols["age"]),
        sex=np.array(cols["sex"]),
        dx=np.array(cols["dx"]),
        volume=np.array(cols["volume"]),
        site=tuple(cols["site"]) if "site" in cols else None,
        cv=np.array(cols["cv"]) if "cv" in cols else None,
        mc_dice=np.array(cols["mc_dice"]) if "mc_dice" in cols else None,
    )


def _fmt_cell(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def write_cohort_csv(table: CohortTable, path: str | Path) -> None:
    header = ["subject_id", "age", "sex", "dx"]
    if table.site is not None:
        header.append("site")
    header.append("volume")
    if table.cv is not None:
        header.append("cv")
    if table.mc_dice is not None:
        header.append("mc_dice")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(table.n):
            row = [table.subject_ids[i], _fmt_cell(table.age[i]),
                   _fmt_cell(table.sex[i]), _fmt_cell(table.dx[i])]
            if table.site is not None:
                row.append(table.site[i])
            row.append(_fmt_cell(table.volume[i]))
            if table.cv is not None:
                row.append(_fmt_cell(table.cv[i]))
            if table.mc_dice is not None:
                row.append(_fmt_cell(table.mc_dice[i]))
            w.writerow(row)


# -- metric report JSON ------------------------------------------------------


def report_to_dict(report: StructureReport) -> dict:
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "scan_id": report.scan_id,
        "dataset": report.dataset,
        "n_samples": report.n_samples,
        "normalized_uncertainty": report.normalized_uncertainty,
        "uncertainty": {
            "min": report.uncertainty_min,
            "mean": report.uncertainty_mean,
            "max": report.uncertainty_max,
        },
        "structures": [
            {
                "label_id": s.label_id,
                "name": s.name,
                "mean_volume": s.mean_volume,
                "std_volume": s.std_volume,
                "cv": s.cv,
                "mc_dice": s.mc_dice,
                "mean_uncertainty": s.mean_uncertainty,
                "consensus_volume": s.consensus_volume,
                "gt_dice": s.gt_dice,
            }
            for s in report.structures
        ],
    }


def write_report(report: StructureReport, path: str | Path) -> None:
    _dump_json(report_to_dict(report), path)


def _opt_float(d: dict, key: str, where: str) -> float | None:
    v = d.get(key)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValidationError(f"{where}.{key} must be a number or null, got {v!r}")
    return float(v)


def report_from_dict(doc: dict, where: str = "report") -> StructureReport:
    if not isinstance(doc, dict):
        raise ValidationError(f"{where} must be a JSON object")
    version = doc.get("schema_version")
    if version != REPORT_SCHEMA_VERSION:
        raise ValidationError(
            f"{where}: schema_version {version!r} unsupported, expected "
            f"{REPORT_SCHEMA_VERSION!r}"
        )
    unc = doc.get("uncertainty")
    if not isinstance(unc, dict):
        raise ValidationError(f"{where}: missing \"uncertainty\" summary object")
    raw = doc.get("structures")
    if not isinstance(raw, list):
        raise ValidationError(f"{where}: \"structures\" must be a JSON array")
    structures = []
    for k, s in enumerate(raw):
        tag = f"{where}.structures[{k}]"
        if not isinstance(s, dict):
            raise ValidationError(f"{tag} must be a JSON object")
        try:
            label_id = int(s["label_id"])
            name = str(s["name"])
            mean_volume = float(s["mean_volume"])
            std_volume = float(s["std_volume"])
            consensus_volume = float(s["consensus_volume"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{tag}: bad or missing required field: {exc}") from exc
        structures.append(StructureMetrics(
            label_id=label_id,
            name=name,
            mean_volume=mean_volume,
            std_volume=std_volume,
            cv=_opt_float(s, "cv", tag),
            mc_dice=_opt_float(s, "mc_dice", tag),
            mean_uncertainty=_opt_float(s, "mean_uncertainty", tag),
            consensus_volume=consensus_volume,
            gt_dice=_opt_float(s, "gt_dice", tag),
        ))
    return StructureReport(
        structures=tuple(structures),
        n_samples=int(doc["n_samples"]),
        uncertainty_min=float(unc["min"]),
        uncertainty_mean=float(unc["mean"]),
        uncertainty_max=float(unc["max"]),
        normalized_uncertainty=bool(doc.get("normalized_uncertainty", False)),
        scan_id=str(doc.get("scan_id", "")),
        dataset=str(doc.get("dataset", "")),
    )


def read_report(path: str | Path) -> StructureReport:
    return report_from_dict(_load_json(path), where=str(path))


# -- heat map ----------------------------------------------------------------


def write_heatmap_volume(
    consensus: LabelVolume,
    report: StructureReport,
    metric: str,
    path: str | Path,
) -> None:
    """Float32 volume where each voxel carries its consensus structure's metric.

    Background and absent-flagged structures map to 0 (an absent structure
    has no consensus voxels anyway).
    """
    if metric not in HEATMAP_METRICS:
        raise ValidationError(f"metric must be one of {HEATMAP_METRICS}, got {metric!r}")
    attr = {"mc_dice": "mc_dice", "cv": "cv", "mean_unc": "mean_uncertainty"}[metric]
    lut = np.zeros(int(consensus.data.max()) + 1, dtype=np.float32)
    for s in report.structures:
        value = getattr(s, attr)
        if s.label_id < lut.size and value is not None:
            lut[s.label_id] = value
    heat = lut[consensus.data]
    write_nifti(path, heat, consensus.geometry)


# -- phantom / noise configs -------------------------------------------------


def read_phantom_json(path: str | Path) -> PhantomSpec:
    """Phantom JSON: dims, spacing?, background?, shapes[{label, kind, center, size}]."""
    doc = _load_json(path)
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: phantom config must be a JSON object")
    try:
        dims = tuple(int(v) for v in doc["dims"])
        spacing = tuple(float(v) for v in doc.get("spacing", (1.0, 1.0, 1.0)))
        geometry = VoxelGeometry(dims, spacing)
        shapes = tuple(
            ShapeSpec(
                label_id=int(s["label"]),
                kind=str(s["kind"]),
                center=tuple(float(v) for v in s["center"]),
                size=tuple(float(v) for v in s["size"]),
            )
            for s in doc["shapes"]
        )
        background = int(doc.get("background", 0))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: bad phantom config: {exc}") from exc
    return PhantomSpec(geometry=geometry, shapes=shapes, background_id=background)


def write_phantom_json(spec: PhantomSpec, path: str | Path) -> None:
    doc = {
        "dims": list(spec.geometry.dims),
        "spacing": list(spec.geometry.spacing),
        "background": spec.background_id,
        "shapes": [
            {"label": s.label_id, "kind": s.kind,
             "center": list(s.center), "size": list(s.size)}
            for s in spec.shapes
        ],
    }
    _dump_json(doc, path)


def _noise_from_dict(doc: dict, where: str) -> NoiseSpec:
    try:
        flip_probs = tuple(
            (int(k), float(v)) for k, v in doc.get("flip_probs", {}).items()
        )
        return NoiseSpec(
            n_samples=int(doc["n_samples"]),
            flip_probs=flip_probs,
            default_flip_prob=float(doc.get("default_flip_prob", 0.0)),
            erosion_dilation_radius=int(doc.get("erosion_dilation_radius", 0)),
            seed=int(doc.get("seed", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{where}: bad noise config: {exc}") from exc


def read_noise_json(path: str | Path) -> tuple[tuple[str, NoiseSpec], ...]:
    """Noise JSON, single-scan or multi-scan.

    Single scan: {"n_samples", "flip_probs": {"label": p, ...}, ...} with
    scan id "". Multi scan: {"scans": [{"scan_id", "seed", "flip_probs"},
    ...]} plus top-level defaults the scan entries inherit.
    """
    doc = _load_json(path)
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: noise config must be a JSON object")
    if "scans" not in doc:
        return (("", _noise_from_dict(doc, str(path))),)
    scans = doc["scans"]
    if not isinstance(scans, list) or not scans:
        raise ValidationError(f"{path}: \"scans\" must be a non-empty JSON array")
    base = {k: v for k, v in doc.items() if k != "scans"}
    out = []
    for k, entry in enumerate(scans):
        if not isinstance(entry, dict):
            raise ValidationError(f"{path}: scans[{k}] must be a JSON object")
        merged = dict(base)
        merged.update(entry)
        scan_id = str(merged.pop("scan_id", f"scan_{k:02d}"))
        out.append((scan_id, _noise_from_dict(merged, f"{path}: scans[{k}]")))
    ids = [sid for sid, _ in out]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: duplicate scan_id values")
    return tuple(out)


# -- sample sets from volume files -------------------------------------------


def read_sample_set(
    label_paths: Sequence[str | Path],
    registry: StructureRegistry,
    prob_paths: Sequence[Sequence[str | Path]] | None = None,
) -> McSampleSet:
    """Assemble a sample set from per-sample label files.

    ``prob_paths``, when given, lists one probability volume per registry
    entry (in registry order) for each sample; the stacks are attached so
    voxel uncertainty reflects the stored soft predictions instead of
    degenerate one-hot indicators.
    """
    from .nifti import read_nifti  # local import to keep module load cheap

    if len(label_paths) < 1:
        raise ValidationError("no sample files given")
    if prob_paths is not None and len(prob_paths) != len(label_paths):
        raise ValidationError(
            f"got {len(prob_paths)} probability entries for {len(label_paths)} samples"
        )
    samples = []
    geometry = None
    for i, p in enumerate(label_paths):
        img = read_nifti(p)
        try:
            labels = img.as_label_volume()
        except ValidationError as exc:
            raise ValidationError(f"{p}: {exc}") from exc
        if geometry is None:
            geometry = labels.geometry
        elif labels.geometry != geometry:
            raise ValidationError(
                f"{p}: geometry {labels.geometry.dims}/{labels.geometry.spacing} does "
                f"not match {label_paths[0]}"
            )
        unknown = labels.check_labels(registry)
        if unknown:
            raise ValidationError(f"{p}: label ids {unknown} not in registry")
        probs = None
        if prob_paths is not None:
            stack_paths = list(prob_paths[i])
            if len(stack_paths) != len(registry.ids):
                raise ValidationError(
                    f"sample {i}: {len(stack_paths)} probability volumes for "
                    f"{len(registry.ids)} registry entries"
                )
            maps = []
            for q in stack_paths:
                pimg = read_nifti(q)
                if pimg.geometry != geometry:
                    raise ValidationError(f"{q}: geometry does not match {p}")
                maps.append(pimg.data.astype(np.float64))
            probs = ProbMapStack(
                geometry=geometry, label_ids=registry.ids, maps=np.stack(maps)
            )
        samples.append(McSample(labels=labels, probs=probs))
    return McSampleSet(geometry=geometry, registry=registry, samples=tuple(samples))


# -- scan manifests ----------------------------------------------------------


def write_scan_manifest(
    path: str | Path,
    samples: Sequence[str],
    gt: str | None = None,
    registry: str | None = None,
    probs: Sequence[Sequence[str]] | None = None,
    extra: dict | None = None,
) -> None:
    """Manifest JSON listing one scan's files, with paths relative to itself."""
    doc: dict = {"schema_version": REPORT_SCHEMA_VERSION, "samples": list(samples)}
    if gt is not None:
        doc["gt"] = gt
    if registry is not None:
        doc["registry"] = registry
    if probs is not None:
        doc["probs"] = [list(per_sample) for per_sample in probs]
    if extra:
        doc.update(extra)
    _dump_json(doc, path)


def read_scan_manifest(path: str | Path) -> dict:
    """Manifest as a dict with "samples"/"gt"/"registry"/"probs" resolved
    to absolute paths against the manifest's own directory."""
    doc = _load_json(path)
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: manifest must be a JSON object")
    if "samples" not in doc or not isinstance(doc["samples"], list) or not doc["samples"]:
        raise ValidationError(f"{path}: manifest needs a non-empty \"samples\" array")
    root = Path(path).resolve().parent

    def resolve(p) -> str:
        q = Path(str(p))
        return str(q if q.is_absolute() else root / q)

    out = dict(doc)
    out["samples"] = [resolve(p) for p in doc["samples"]]
    for key in ("gt", "registry"):
        if doc.get(key) is not None:
            out[key] = resolve(doc[key])
    if doc.get("probs") is not None:
        if not isinstance(doc["probs"], list) or len(doc["probs"]) != len(doc["samples"]):
            raise ValidationError(
                f"{path}: \"probs\" must list one entry per sample"
            )
        out["probs"] = [[resolve(p) for p in per_sample] for per_sample in doc["probs"]]
    return out
