"""End-to-end command line behavior, run in process."""

import json

import numpy as np
import pytest

from segqc.cli import main as cli_main
from segqc.io import read_report
from segqc.nifti import read_nifti
from segqc.stats import CohortTable
from segqc.io import write_cohort_csv


@pytest.fixture()
def configs(tmp_path):
    """Small phantom and noise configs plus an output root."""
    phantom = tmp_path / "phantom.json"
    phantom.write_text(json.dumps({
        "dims": [20, 20, 20],
        "shapes": [
            {"label": 1, "kind": "box", "center": [6.5, 9.5, 9.5], "size": [8, 8, 8]},
            {"label": 2, "kind": "box", "center": [14.5, 9.5, 9.5], "size": [5, 5, 5]},
        ],
    }))
    noise = tmp_path / "noise.json"
    noise.write_text(json.dumps({"n_samples": 4, "default_flip_prob": 0.15, "seed": 3}))
    return tmp_path, phantom, noise


def run(argv):
    return cli_main([str(a) for a in argv])


def no_temp_litter(root):
    return not [p for p in root.rglob(".tmp-*")]


# -- simulate ------------------------------------------------------------------


def test_simulate_single_scan_layout(configs, capsys):
    root, phantom, noise = configs
    out = root / "sim"
    assert run(["simulate", "--phantom", phantom, "--noise", noise, "--out", out]) == 0
    assert (out / "gt.nii").exists()
    assert (out / "registry.json").exists()
    assert (out / "manifest.json").exists()
    assert sorted(p.name for p in out.glob("sample_*.nii")) == [
        f"sample_{i:03d}.nii" for i in range(4)
    ]
    assert "wrote" in capsys.readouterr().out
    assert no_temp_litter(out)


def test_simulate_is_deterministic(configs):
    root, phantom, noise = configs
    a, b = root / "a", root / "b"
    run(["simulate", "--phantom", phantom, "--noise", noise, "--out", a])
    run(["simulate", "--phantom", phantom, "--noise", noise, "--out", b])
    for pa in sorted(a.rglob("*")):
        if pa.is_file():
            pb = b / pa.relative_to(a)
            assert pb.exists()
            assert pa.read_bytes() == pb.read_bytes(), pa.name


def test_simulate_seed_flag_changes_samples(configs):
    root, phantom, noise = configs
    a, b = root / "a", root / "b"
    run(["simulate", "--phantom", phantom, "--noise", noise, "--out", a])
    run(["simulate", "--phantom", phantom, "--noise", noise, "--out", b,
         "--seed", "999"])
    assert (a / "gt.nii").read_bytes() == (b / "gt.nii").read_bytes()
    assert (a / "sample_000.nii").read_bytes() != (b / "sample_000.nii").read_bytes()


def test_simulate_multi_scan_layout(configs):
    root, phantom, _ = configs
    noise = root / "multi.json"
    noise.write_text(json.dumps({
        "n_samples": 3,
        "scans": [{"scan_id": f"scan_{k}", "seed": k, "default_flip_prob": 0.1}
                  for k in range(3)],
    }))
    out = root / "multi"
    assert run(["simulate", "--phantom", phantom, "--noise", noise, "--out", out]) == 0
    assert (out / "gt.nii").exists() and (out / "dataset.json").exists()
    for k in range(3):
        scan = out / f"scan_{k}"
        assert (scan / "manifest.json").exists()
        assert len(list(scan.glob("sample_*.nii"))) == 3
    doc = json.loads((out / "dataset.json").read_text())
    assert doc["scans"] == ["scan_0", "scan_1", "scan_2"]


def test_simulate_with_probs_writes_stacks(configs):
    root, phantom, noise = configs
    out = root / "sim"
    assert run(["simulate", "--phantom", phantom, "--noise", noise, "--out", out,
                "--with-probs"]) == 0
    # one stack per sample per registry entry (background + 2 structures)
    assert len(list(out.glob("prob_*_label_*.nii.gz"))) == 4 * 3
    man = json.loads((out / "manifest.json").read_text())
    assert len(man["probs"]) == 4 and len(man["probs"][0]) == 3


# -- metrics / consensus ---------------------------------------------------------


@pytest.fixture()
def sim_dir(configs):
    root, phantom, noise = configs
    out = root / "sim"
    run(["simulate", "--phantom", phantom, "--noise", noise, "--out", out])
    return out


def test_metrics_from_directory(sim_dir, capsys):
    report_path = sim_dir / "report.json"
    code = run(["metrics", sim_dir, "--registry", sim_dir / "registry.json",
                "--gt", sim_dir / "gt.nii", "--out", report_path,
                "--scan-id", "demo"])
    assert code == 0
    rep = read_report(report_path)
    assert rep.scan_id == "demo"
    assert rep.n_samples == 4
    assert {s.label_id for s in rep.structures} == {1, 2}
    assert all(s.gt_dice is not None for s in rep.structures)
    out = capsys.readouterr().out
    assert "structure_1" in out and "gt_dice" in out


def test_metrics_from_manifest_matches_directory(sim_dir):
    a, b = sim_dir / "a.json", sim_dir / "b.json"
    run(["metrics", sim_dir, "--registry", sim_dir / "registry.json",
         "--gt", sim_dir / "gt.nii", "--out", a])
    run(["metrics", "--manifest", sim_dir / "manifest.json", "--out", b])
    ra, rb = read_report(a), read_report(b)
    assert ra.structures == rb.structures


def test_metrics_side_outputs(configs):
    # probability stacks give the voxel uncertainty something to measure;
    # label-only samples yield an exactly-zero map by design
    root, phantom, noise = configs
    sim = root / "sim"
    run(["simulate", "--phantom", phantom, "--noise", noise, "--out", sim,
         "--with-probs"])
    unc_path = sim / "unc.nii.gz"
    heat_path = sim / "heat.nii.gz"
    code = run(["metrics", "--manifest", sim / "manifest.json",
                "--out", sim / "r.json",
                "--uncertainty-out", unc_path,
                "--heatmap-out", heat_path, "--heatmap-metric", "cv"])
    assert code == 0
    unc = read_nifti(unc_path)
    assert unc.data.dtype == np.float32
    assert unc.data.min() >= 0.0 and unc.data.max() > 0.0
    heat = read_nifti(heat_path)
    rep = read_report(sim / "r.json")
    consensus_cv = {s.label_id: s.cv for s in rep.structures}
    # heat volume paints each consensus structure with its cv
    got = set(np.unique(heat.data))
    assert np.float32(consensus_cv[1]) in got
    assert no_temp_litter(sim)


def test_metrics_ignores_dotfiles_and_prob_stacks(configs):
    root, phantom, noise = configs
    out = root / "sim"
    run(["simulate", "--phantom", phantom, "--noise", noise, "--out", out,
         "--with-probs"])
    (out / ".hidden.nii").write_bytes(b"junk")
    # directory discovery must see exactly the 4 bare sample .nii files,
    # skipping prob_*.nii.gz and dotfiles
    code = run(["metrics", out, "--registry", out / "registry.json",
                "--out", out / "r.json"])
    assert code == 0
    assert read_report(out / "r.json").n_samples == 4


def test_consensus_zero_noise_equals_gt(configs):
    root, phantom, _ = configs
    noise = root / "clean.json"
    noise.write_text(json.dumps({"n_samples": 3, "seed": 0}))
    out = root / "sim"
    run(["simulate", "--phantom", phantom, "--noise", noise, "--out", out])
    cons = out / "consensus.nii"
    assert run(["consensus", out, "--registry", out / "registry.json",
                "--out", cons]) == 0
    assert np.array_equal(read_nifti(cons).data, read_nifti(out / "gt.nii").data)


def test_normalize_entropy_flag_recorded(sim_dir):
    p = sim_dir / "norm.json"
    run(["metrics", "--manifest", sim_dir / "manifest.json", "--out", p,
         "--normalize-entropy"])
    rep = read_report(p)
    assert rep.normalized_uncertainty
    # per-sample entropy over 3 registry entries is at most ln 3
    assert rep.uncertainty_max <= np.log(3) + 1e-9


# -- correlate -------------------------------------------------------------------


@pytest.fixture()
def report_dir(configs):
    root, phantom, _ = configs
    noise = root / "multi.json"
    noise.write_text(json.dumps({
        "n_samples": 4,
        "scans": [{"scan_id": f"scan_{k}", "seed": 10 + k,
                   "default_flip_prob": 0.05 + 0.07 * k} for k in range(4)],
    }))
    sim = root / "sim"
    # probability stacks make mean structure uncertainty vary across scans
    run(["simulate", "--phantom", phantom, "--noise", noise, "--out", sim,
         "--with-probs"])
    reports = root / "reports"
    reports.mkdir()
    for k in range(4):
        run(["metrics", "--manifest", sim / f"scan_{k}" / "manifest.json",
             "--out", reports / f"scan_{k}.json", "--scan-id", f"scan_{k}"])
    return root, reports


def test_correlate_over_report_directory(report_dir, capsys):
    root, reports = report_dir
    out_csv = root / "corr.csv"
    assert run(["correlate", reports, "--out", out_csv]) == 0
    lines = out_csv.read_text().strip().splitlines()
    assert lines[0] == "dataset,metric,r,n_used,n_dropped"
    assert len(lines) == 4  # three metrics, one (default) dataset
    stdout = capsys.readouterr().out
    assert "mean_unc" in stdout and "mc_dice" in stdout
    rows = {line.split(",")[1]: float(line.split(",")[2]) for line in lines[1:]}
    assert set(rows) == {"mean_unc", "cv", "mc_dice"}
    for r in rows.values():
        assert -1.0 <= r <= 1.0


def test_correlate_needs_three_reports(report_dir):
    root, reports = report_dir
    few = root / "few"
    few.mkdir()
    for p in sorted(reports.glob("*.json"))[:2]:
        (few / p.name).write_bytes(p.read_bytes())
    assert run(["correlate", few]) == 1


def test_correlate_requires_gt_dice(configs, capsys):
    root, phantom, noise = configs
    sim = root / "sim"
    run(["simulate", "--phantom", phantom, "--noise", noise, "--out", sim])
    reports = root / "reports"
    reports.mkdir()
    for k in range(3):
        # no --gt: reports carry gt_dice null
        run(["metrics", sim, "--registry", sim / "registry.json",
             "--out", reports / f"r{k}.json"])
    assert run(["correlate", reports]) == 1
    assert "gt_dice" in capsys.readouterr().err


# -- group -----------------------------------------------------------------------


@pytest.fixture()
def cohort_csv(tmp_path):
    from segqc.synth import make_cohort

    table, _ = make_cohort(40, seed=21)
    p = tmp_path / "cohort.csv"
    write_cohort_csv(table, p)
    return p


def test_group_runs_all_modes(cohort_csv, tmp_path, capsys):
    out_csv = tmp_path / "group.csv"
    assert run(["group", cohort_csv, "--out", out_csv]) == 0
    lines = out_csv.read_text().strip().splitlines()
    assert lines[0] == "mode,beta_d,se_d,p_d,n_used,n_dropped"
    modes = [line.split(",")[0] for line in lines[1:]]
    assert modes == ["none", "inv_cv", "inv_one_minus_dice", "huber"]
    stdout = capsys.readouterr().out
    assert "standardized" in stdout


def test_group_mode_subset_and_raw_scale(cohort_csv, capsys):
    assert run(["group", cohort_csv, "--modes", "none,huber",
                "--no-standardize"]) == 0
    stdout = capsys.readouterr().out
    assert "raw" in stdout
    assert "inv_cv" not in stdout


def test_group_rejects_unknown_mode(cohort_csv):
    assert run(["group", cohort_csv, "--modes", "ols,bogus"]) == 1


# -- exit codes and input validation ------------------------------------------------


def test_no_subcommand_prints_help(capsys):
    assert run([]) == 1
    assert "usage" in capsys.readouterr().out.lower()


def test_missing_files_exit_2(tmp_path):
    assert run(["group", tmp_path / "nope.csv"]) == 2
    assert run(["metrics", "--manifest", tmp_path / "nope.json",
                "--out", tmp_path / "r.json"]) == 2


def test_metrics_needs_at_least_two_samples(sim_dir, capsys):
    one = sim_dir / "sample_000.nii"
    assert run(["metrics", one, "--registry", sim_dir / "registry.json",
                "--out", sim_dir / "r.json"]) == 1
    assert "2" in capsys.readouterr().err


def test_metrics_requires_registry(sim_dir, capsys):
    assert run(["metrics", sim_dir, "--out", sim_dir / "r.json"]) == 1
    assert "registry" in capsys.readouterr().err


def test_samples_and_manifest_are_exclusive(sim_dir, capsys):
    assert run(["metrics", sim_dir, "--manifest", sim_dir / "manifest.json",
                "--out", sim_dir / "r.json"]) == 1
    assert "not both" in capsys.readouterr().err


def test_bad_heatmap_metric_is_usage_error(sim_dir):
    assert run(["metrics", "--manifest", sim_dir / "manifest.json",
                "--out", sim_dir / "r.json",
                "--heatmap-out", sim_dir / "h.nii",
                "--heatmap-metric", "volume"]) == 1


def test_thread_cap_env_validation(configs, monkeypatch, capsys):
    # the cap is read on the multi-scan path, where the pool is created
    root, phantom, _ = configs
    noise = root / "multi.json"
    noise.write_text(json.dumps({
        "n_samples": 2,
        "scans": [{"scan_id": f"s{k}", "seed": k} for k in range(2)],
    }))
    monkeypatch.setenv("SEGQC_THREADS", "zero")
    assert run(["simulate", "--phantom", phantom, "--noise", noise,
                "--out", root / "x"]) == 1
    assert "SEGQC_THREADS" in capsys.readouterr().err
    monkeypatch.setenv("SEGQC_THREADS", "0")
    assert run(["simulate", "--phantom", phantom, "--noise", noise,
                "--out", root / "x"]) == 1


def test_thread_cap_env_accepted(configs, monkeypatch):
    root, phantom, _ = configs
    noise = root / "multi.json"
    noise.write_text(json.dumps({
        "n_samples": 2,
        "scans": [{"scan_id": f"s{k}", "seed": k} for k in range(3)],
    }))
    monkeypatch.setenv("SEGQC_THREADS", "1")
    assert run(["simulate", "--phantom", phantom, "--noise", noise,
                "--out", root / "capped"]) == 0
