"""Registry JSON, cohort CSV, report JSON, configs, manifests, sample sets."""

import json
import math

import numpy as np
import pytest

from segqc.io import (
    read_cohort_csv,
    read_noise_json,
    read_phantom_json,
    read_registry,
    read_report,
    read_sample_set,
    read_scan_manifest,
    report_from_dict,
    report_to_dict,
    write_cohort_csv,
    write_heatmap_volume,
    write_phantom_json,
    write_registry,
    write_report,
    write_scan_manifest,
)
from segqc.metrics import StructureMetrics, StructureReport
from segqc.nifti import read_nifti, write_nifti
from segqc.stats import CohortTable
from segqc.synth import NoiseSpec, contact_pair_phantom, make_phantom, registry_for_phantom
from segqc.volumes import LabelVolume, StructureRegistry, ValidationError, VoxelGeometry


# -- registry ------------------------------------------------------------------


def test_registry_round_trip(tmp_path):
    reg = StructureRegistry(entries=((0, "background"), (1, "left"), (2, "right")),
                            background_id=0)
    p = tmp_path / "reg.json"
    write_registry(reg, p)
    back = read_registry(p)
    assert back == reg


def test_registry_background_added_when_unlisted(tmp_path):
    p = tmp_path / "reg.json"
    p.write_text(json.dumps({"background": 0,
                             "structures": [{"id": 1, "name": "hippocampus"}]}))
    reg = read_registry(p)
    assert (0, "background") in reg.entries
    assert reg.foreground == ((1, "hippocampus"),)


@pytest.mark.parametrize("doc,needle", [
    ([1, 2], "JSON object"),
    ({"structures": []}, "background"),
    ({"background": "0", "structures": []}, "integer"),
    ({"background": 0, "structures": {}}, "array"),
    ({"background": 0, "structures": [{"id": 1}]}, "name"),
    ({"background": 0, "structures": [{"id": "x", "name": "a"}]}, "integer"),
    ({"background": 0, "structures": [{"id": 1, "name": 2}]}, "string"),
])
def test_registry_validation(tmp_path, doc, needle):
    p = tmp_path / "reg.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(ValidationError, match=needle):
        read_registry(p)


def test_registry_malformed_json(tmp_path):
    p = tmp_path / "reg.json"
    p.write_text("{not json")
    with pytest.raises(ValidationError):
        read_registry(p)


def test_registry_missing_file_is_oserror(tmp_path):
    with pytest.raises(OSError):
        read_registry(tmp_path / "nope.json")


# -- cohort CSV ------------------------------------------------------------------


def cohort_table():
    return CohortTable(
        subject_ids=("sub-01", "sub-02", "sub-03", "sub-04"),
        age=np.array([30.0, 44.5, 60.25, 70.0]),
        sex=np.array([0.0, 1.0, 1.0, 0.0]),
        dx=np.array([0.0, 0.0, 1.0, 1.0]),
        volume=np.array([1.1, 0.9, 1.3, 0.7]),
        site=("a", "a", "b", "b"),
        cv=np.array([0.1, math.nan, 0.3, 0.2]),
        mc_dice=np.array([0.9, 0.8, math.nan, 0.95]),
    )


def test_cohort_csv_round_trip(tmp_path):
    t = cohort_table()
    p = tmp_path / "cohort.csv"
    write_cohort_csv(t, p)
    back = read_cohort_csv(p)
    assert back.subject_ids == t.subject_ids
    assert back.site == t.site
    # repr-based cells reparse to the same doubles
    assert np.array_equal(back.age, t.age)
    assert np.array_equal(back.volume, t.volume)
    assert np.array_equal(np.isnan(back.cv), np.isnan(t.cv))
    assert np.array_equal(back.cv[~np.isnan(back.cv)], t.cv[~np.isnan(t.cv)])


def test_cohort_csv_optional_columns_absent(tmp_path):
    p = tmp_path / "cohort.csv"
    p.write_text("subject_id,age,sex,dx,volume\n"
                 "s1,30,0,1,1.5\n"
                 "s2,40,1,0,1.2\n"
                 "s3,50,0,0,1.0\n")
    t = read_cohort_csv(p)
    assert t.site is None and t.cv is None and t.mc_dice is None
    assert t.n == 3


def test_cohort_csv_blank_lines_skipped(tmp_path):
    p = tmp_path / "cohort.csv"
    p.write_text("subject_id,age,sex,dx,volume\n\ns1,30,0,1,1.5\n   \ns2,40,1,0,1.2\n"
                 "s3,31,1,1,0.9\n")
    assert read_cohort_csv(p).n == 3


def test_cohort_csv_empty_optional_cell_is_nan(tmp_path):
    p = tmp_path / "cohort.csv"
    p.write_text("subject_id,age,sex,dx,volume,cv\ns1,30,0,1,1.5,\n"
                 "s2,40,1,0,1.2,0.3\ns3,33,0,0,1.1,0.2\n")
    t = read_cohort_csv(p)
    assert math.isnan(t.cv[0]) and t.cv[1] == 0.3


@pytest.mark.parametrize("text,needle", [
    ("", "empty file"),
    ("age,sex,dx,volume\n", "subject_id"),
    ("subject_id,age,sex,dx,volume,extra\n", "unknown columns"),
    ("subject_id,age,sex,dx,volume,age\n", "missing required column|duplicate"),
    ("subject_id,age,sex,dx,volume\ns1,30,0,1\n", "expected 5 fields"),
    ("subject_id,age,sex,dx,volume\ns1,,0,1,1.5\n", "line 2, column age"),
    ("subject_id,age,sex,dx,volume\ns1,abc,0,1,1.5\n", "line 2, column age"),
    ("subject_id,age,sex,dx,volume\n", "no data rows"),
])
def test_cohort_csv_validation(tmp_path, text, needle):
    p = tmp_path / "cohort.csv"
    p.write_text(text)
    with pytest.raises(ValidationError, match=needle):
        read_cohort_csv(p)


def test_cohort_csv_rejects_non_utf8(tmp_path):
    p = tmp_path / "cohort.csv"
    p.write_bytes("subject_id,age,sex,dx,volume\ns\xe9,30,0,1,1.5\n".encode("latin-1"))
    with pytest.raises(ValidationError, match="UTF-8"):
        read_cohort_csv(p)


# -- report JSON ------------------------------------------------------------------


def sample_report():
    return StructureReport(
        structures=(
            StructureMetrics(label_id=1, name="left", mean_volume=120.5, std_volume=3.2,
                             cv=0.0265, mc_dice=0.91, mean_uncertainty=0.42,
                             consensus_volume=121.0, gt_dice=0.93),
            StructureMetrics(label_id=2, name="right", mean_volume=0.0, std_volume=0.0,
                             cv=None, mc_dice=None, mean_uncertainty=None,
                             consensus_volume=0.0, gt_dice=None),
        ),
        n_samples=12,
        uncertainty_min=0.0,
        uncertainty_mean=0.173,
        uncertainty_max=3.1,
        normalized_uncertainty=False,
        scan_id="scan_03",
        dataset="phantoms",
    )


def test_report_round_trip(tmp_path):
    rep = sample_report()
    p = tmp_path / "report.json"
    write_report(rep, p)
    assert read_report(p) == rep


def test_report_none_serializes_as_null(tmp_path):
    p = tmp_path / "report.json"
    write_report(sample_report(), p)
    doc = json.loads(p.read_text())
    absent = doc["structures"][1]
    assert absent["cv"] is None and absent["mc_dice"] is None
    assert absent["mean_uncertainty"] is None and absent["gt_dice"] is None


def test_report_floats_round_trip_shortest(tmp_path):
    # json emits repr floats: parsing must restore the exact double
    rep = sample_report()
    p = tmp_path / "report.json"
    write_report(rep, p)
    back = read_report(p)
    assert back.structures[0].cv == rep.structures[0].cv
    assert back.uncertainty_mean == rep.uncertainty_mean


def test_report_ignores_unknown_fields():
    doc = report_to_dict(sample_report())
    doc["future_field"] = {"x": 1}
    doc["structures"][0]["another"] = True
    rep = report_from_dict(doc)
    assert rep == sample_report()


def test_report_rejects_wrong_schema_version():
    doc = report_to_dict(sample_report())
    doc["schema_version"] = "2"
    with pytest.raises(ValidationError, match="schema_version"):
        report_from_dict(doc)


def test_report_rejects_non_numeric_optional():
    doc = report_to_dict(sample_report())
    doc["structures"][0]["cv"] = "high"
    with pytest.raises(ValidationError, match="cv"):
        report_from_dict(doc)


def test_report_missing_required_field():
    doc = report_to_dict(sample_report())
    del doc["structures"][0]["mean_volume"]
    with pytest.raises(ValidationError, match="structures\\[0\\]"):
        report_from_dict(doc)


# -- heat map ----------------------------------------------------------------------


def test_heatmap_volume_paints_consensus_labels(tmp_path):
    geom = VoxelGeometry((4, 4, 4), (1.0, 1.0, 1.0))
    data = np.zeros(geom.dims, dtype=np.uint8)
    data[:2] = 1
    data[2:, 2:] = 2
    consensus = LabelVolume(geom, data)
    rep = StructureReport(
        structures=(
            StructureMetrics(1, "a", 31.0, 1.0, cv=0.25, mc_dice=0.9,
                             mean_uncertainty=0.5, consensus_volume=32.0),
            StructureMetrics(2, "b", 16.0, 0.0, cv=None, mc_dice=None,
                             mean_uncertainty=None, consensus_volume=16.0),
        ),
        n_samples=5, uncertainty_min=0.0, uncertainty_mean=0.1, uncertainty_max=1.0,
    )
    p = tmp_path / "heat.nii.gz"
    write_heatmap_volume(consensus, rep, "cv", p)
    heat = read_nifti(p)
    assert heat.data.dtype == np.float32
    assert np.all(heat.data[data == 1] == np.float32(0.25))
    assert np.all(heat.data[data == 2] == 0.0)  # absent-flagged: painted 0
    assert np.all(heat.data[data == 0] == 0.0)
    with pytest.raises(ValidationError, match="metric"):
        write_heatmap_volume(consensus, rep, "dice", tmp_path / "x.nii")


# -- phantom / noise configs --------------------------------------------------------


def test_phantom_json_round_trip(tmp_path):
    spec = contact_pair_phantom()
    p = tmp_path / "phantom.json"
    write_phantom_json(spec, p)
    back = read_phantom_json(p)
    assert back == spec
    assert np.array_equal(make_phantom(back).data, make_phantom(spec).data)


def test_phantom_json_defaults_and_errors(tmp_path):
    p = tmp_path / "phantom.json"
    p.write_text(json.dumps({
        "dims": [8, 8, 8],
        "shapes": [{"label": 1, "kind": "box", "center": [3.5, 3.5, 3.5],
                    "size": [4, 4, 4]}],
    }))
    spec = read_phantom_json(p)
    assert spec.geometry.spacing == (1.0, 1.0, 1.0)
    assert spec.background_id == 0
    p.write_text(json.dumps({"dims": [8, 8, 8], "shapes": [{"kind": "box"}]}))
    with pytest.raises(ValidationError, match="phantom"):
        read_phantom_json(p)


def test_noise_json_single_scan(tmp_path):
    p = tmp_path / "noise.json"
    p.write_text(json.dumps({"n_samples": 6, "flip_probs": {"1": 0.1, "2": 0.3},
                             "seed": 9}))
    scans = read_noise_json(p)
    assert len(scans) == 1
    sid, spec = scans[0]
    assert sid == ""
    assert spec == NoiseSpec(n_samples=6, flip_probs=((1, 0.1), (2, 0.3)), seed=9)


def test_noise_json_multi_scan_inherits_base(tmp_path):
    p = tmp_path / "noise.json"
    p.write_text(json.dumps({
        "n_samples": 4,
        "default_flip_prob": 0.05,
        "scans": [
            {"scan_id": "s0", "seed": 1},
            {"seed": 2, "n_samples": 6},
        ],
    }))
    scans = read_noise_json(p)
    assert [sid for sid, _ in scans] == ["s0", "scan_01"]
    assert scans[0][1].n_samples == 4 and scans[0][1].default_flip_prob == 0.05
    assert scans[1][1].n_samples == 6  # scan entry overrides base


def test_noise_json_duplicate_scan_ids(tmp_path):
    p = tmp_path / "noise.json"
    p.write_text(json.dumps({"n_samples": 4,
                             "scans": [{"scan_id": "a", "seed": 1},
                                       {"scan_id": "a", "seed": 2}]}))
    with pytest.raises(ValidationError, match="duplicate"):
        read_noise_json(p)


def test_noise_json_bad_values(tmp_path):
    p = tmp_path / "noise.json"
    p.write_text(json.dumps({"n_samples": 4, "flip_probs": {"1": "high"}}))
    with pytest.raises(ValidationError, match="noise"):
        read_noise_json(p)
    p.write_text(json.dumps({"scans": []}))
    with pytest.raises(ValidationError, match="scans"):
        read_noise_json(p)


# -- sample sets and manifests ---------------------------------------------------------


def write_sample_files(tmp_path, n=3, noise=0.2):
    from segqc.synth import PhantomSpec, ShapeSpec, sample_mc

    geom = VoxelGeometry((24, 24, 24), (1.0, 1.0, 1.0))
    spec = PhantomSpec(geometry=geom, shapes=(
        ShapeSpec(1, "box", (7.5, 11.5, 11.5), (8.0, 8.0, 8.0)),
        ShapeSpec(2, "box", (16.5, 11.5, 11.5), (6.0, 6.0, 6.0)),
    ))
    gt = make_phantom(spec)
    reg = registry_for_phantom(spec)

    ss = sample_mc(gt, reg, NoiseSpec(n_samples=n, default_flip_prob=noise, seed=1),
                   with_probs=False)
    paths = []
    for i, s in enumerate(ss.samples):
        p = tmp_path / f"sample_{i:03d}.nii"
        write_nifti(p, s.labels)
        paths.append(p)
    gt_path = tmp_path / "gt.nii"
    write_nifti(gt_path, gt)
    return paths, gt_path, reg, ss


def test_read_sample_set_matches_in_memory(tmp_path):
    paths, _, reg, ss = write_sample_files(tmp_path)
    loaded = read_sample_set(paths, reg)
    assert loaded.n == ss.n
    for a, b in zip(loaded.samples, ss.samples):
        assert np.array_equal(a.labels.data, b.labels.data)


def test_read_sample_set_validates_geometry(tmp_path):
    paths, _, reg, _ = write_sample_files(tmp_path)
    odd = tmp_path / "odd.nii"
    write_nifti(odd, np.zeros((4, 4, 4), dtype=np.uint8),
                VoxelGeometry((4, 4, 4), (1.0, 1.0, 1.0)))
    with pytest.raises(ValidationError, match="odd.nii"):
        read_sample_set(paths + [odd], reg)


def test_read_sample_set_validates_labels(tmp_path):
    paths, _, reg, _ = write_sample_files(tmp_path)
    rogue = tmp_path / "rogue.nii"
    data = np.full((24, 24, 24), 77, dtype=np.uint8)
    write_nifti(rogue, data, VoxelGeometry((24, 24, 24), (1.0, 1.0, 1.0)))
    with pytest.raises(ValidationError, match="rogue.nii"):
        read_sample_set(paths + [rogue], reg)


def test_read_sample_set_refuses_float_labels(tmp_path):
    paths, _, reg, _ = write_sample_files(tmp_path)
    fl = tmp_path / "float.nii"
    write_nifti(fl, np.zeros((24, 24, 24), dtype=np.float32),
                VoxelGeometry((24, 24, 24), (1.0, 1.0, 1.0)))
    with pytest.raises(ValidationError, match="float.nii"):
        read_sample_set([fl] + paths[1:], reg)


def test_scan_manifest_round_trip_resolves_paths(tmp_path):
    paths, gt_path, reg, _ = write_sample_files(tmp_path)
    from segqc.io import write_registry

    reg_path = tmp_path / "registry.json"
    write_registry(reg, reg_path)
    man = tmp_path / "manifest.json"
    write_scan_manifest(man, samples=[p.name for p in paths], gt=gt_path.name,
                        registry=reg_path.name)
    doc = read_scan_manifest(man)
    assert doc["samples"] == [str(p) for p in paths]
    assert doc["gt"] == str(gt_path)
    assert doc["registry"] == str(reg_path)


def test_scan_manifest_needs_samples(tmp_path):
    man = tmp_path / "manifest.json"
    man.write_text(json.dumps({"schema_version": "1", "samples": []}))
    with pytest.raises(ValidationError, match="samples"):
        read_scan_manifest(man)


def test_scan_manifest_probs_shape_checked(tmp_path):
    man = tmp_path / "manifest.json"
    man.write_text(json.dumps({"schema_version": "1",
                               "samples": ["a.nii", "b.nii"],
                               "probs": [["p.nii"]]}))
    with pytest.raises(ValidationError, match="probs"):
        read_scan_manifest(man)
