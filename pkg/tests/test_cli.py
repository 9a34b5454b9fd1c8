import csv
import json
import os

import numpy as np
import pytest

from abdosim import dataset as ds
from abdosim import rvol
from abdosim.cli import EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL, main
from abdosim.dataset import DatasetConfig, generate
from abdosim.errors import ConfigError
from abdosim.evaluate import evaluate_dataset, read_table
from abdosim.sweep import SweepConfig, read_rows, run_sweep

COARSE = [[32, 32, 16], [8.0, 8.0, 8.0]]
SMALL = [[64, 64, 32], [4.0, 4.0, 4.0]]


def write_config(path, **kw):
    doc = {"grid": SMALL, "n_models": 1}
    doc.update(kw)
    path.write_text(json.dumps(doc))
    return str(path)


def mtimes(root):
    return {p: p.stat().st_mtime_ns for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def full(tmp_path_factory):
    root = tmp_path_factory.mktemp("full")
    cfg = DatasetConfig(n_models=1, grid=tuple(tuple(a) for a in SMALL), output=str(root))
    generate(cfg)
    return root


# ---------------------------------------------------------------- generate


def test_ct_only_file_count_and_idempotence(tmp_path):
    conf = write_config(tmp_path / "c.json", n_models=2, modalities=["CT"])
    out = tmp_path / "ds"
    assert main(["generate", "--config", conf, "--out", str(out)]) == EXIT_OK
    for i in range(2):
        files = sorted(p.name for p in (out / f"model_{i:03d}").iterdir())
        assert files == ["ct_exhale.rvol", "ct_inhale.rvol", "field_exhale_to_inhale.rvol",
                         "labels_exhale.rvol", "labels_inhale.rvol", "manifest.json"]
    before = mtimes(out / "model_000") | mtimes(out / "model_001")
    assert main(["generate", "--config", conf, "--out", str(out)]) == EXIT_OK
    assert mtimes(out / "model_000") | mtimes(out / "model_001") == before


def test_corrupted_artifact_is_rebuilt(tmp_path):
    cfg = DatasetConfig(n_models=1, modalities=("CT",), grid=tuple(tuple(a) for a in COARSE),
                        output=str(tmp_path))
    generate(cfg)
    target = tmp_path / "model_000" / "ct_inhale.rvol"
    good = target.read_bytes()
    target.write_bytes(good[:-8] + b"\0" * 8)
    assert generate(cfg) == {0: "built"}
    assert target.read_bytes() == good


def test_changed_config_rebuilds(tmp_path):
    grid = tuple(tuple(a) for a in COARSE)
    generate(DatasetConfig(n_models=1, modalities=("CT",), grid=grid, output=str(tmp_path)))
    status = generate(DatasetConfig(n_models=1, modalities=("CT",), grid=grid, base_seed=5,
                                    output=str(tmp_path)))
    assert status == {0: "built"}
    assert ds.read_manifest(tmp_path / "model_000")["seed"] == 5


def test_manifest_lists_every_modality_and_phase_with_shared_geometry(full):
    d = full / "model_000"
    man = ds.read_manifest(d)
    pairs = {(a["modality"], a["phase"]) for a in man["artifacts"] if "modality" in a}
    assert pairs == {(m, p) for m in ("CT", "CBCT", "MRI") for p in ("exhale", "inhale")}
    geoms = set()
    for a in man["artifacts"]:
        h = rvol.read_header(d / a["file"])
        geoms.add(json.dumps([h["dims"], h["spacing"], h["origin"]]))
        assert ds.sha256_file(d / a["file"]) == a["sha256"]
    assert len(geoms) == 1


def test_many_models_manifest_count(tmp_path):
    cfg = DatasetConfig(n_models=56, grid=tuple(tuple(a) for a in COARSE), output=str(tmp_path))
    status = generate(cfg)
    assert list(status.values()) == ["built"] * 56
    mans = ds.list_models(tmp_path)
    assert len(mans) == 56
    for d in mans:
        arts = ds.read_manifest(d)["artifacts"]
        assert sum("modality" in a for a in arts) == 6
    seeds = {ds.read_manifest(d)["seed"] for d in mans}
    assert len(seeds) == 56


def test_generate_is_byte_deterministic(tmp_path):
    conf = write_config(tmp_path / "c.json", grid=COARSE)
    for name in ("a", "b"):
        assert main(["generate", "--config", conf, "--out", str(tmp_path / name)]) == EXIT_OK
    a = sorted((tmp_path / "a" / "model_000").glob("*.rvol"))
    assert len(a) == 11
    for p in a:
        assert p.read_bytes() == (tmp_path / "b" / "model_000" / p.name).read_bytes()


def test_seed_flag_changes_content(tmp_path):
    conf = write_config(tmp_path / "c.json", grid=COARSE, modalities=["CT"])
    main(["generate", "--config", conf, "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["generate", "--config", conf, "--out", str(tmp_path / "b"), "--seed", "2"])
    pa = tmp_path / "a" / "model_000" / "labels_exhale.rvol"
    assert pa.read_bytes() != (tmp_path / "b" / "model_000" / "labels_exhale.rvol").read_bytes()


def test_full_resolution_geometry():
    g = DatasetConfig(resolution="paper").geometry
    assert g.dims == (256, 256, 64) and g.spacing == (1.0, 1.0, 2.0)
    assert DatasetConfig().geometry.dims == (128, 128, 64)


@pytest.mark.parametrize("doc", [
    {"n_models": 0},
    {"modalities": ["PET"]},
    {"resolution": "huge"},
    {"seeds": [1, 2], "n_models": 3},
    {"unknown_key": 1},
    {"respiration": {"phase": 2.0}},
])
def test_bad_dataset_config_exits_1(tmp_path, doc):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    assert main(["generate", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_missing_config_exits_1(tmp_path):
    assert main(["generate", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG


def test_config_roundtrip():
    cfg = DatasetConfig(n_models=3, seeds=(4, 5, 6), modalities=("CT", "MRI"),
                        grid=((32, 32, 16), (8.0, 8.0, 8.0)))
    again = DatasetConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()
    assert [again.seed_of(i) for i in range(3)] == [4, 5, 6]


def test_failed_model_leaves_no_manifest(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("disk full")
    cfg = DatasetConfig(n_models=1, modalities=("CT",), grid=tuple(tuple(a) for a in COARSE),
                        output=str(tmp_path))
    monkeypatch.setattr(ds.mo, "simulate", boom)
    status = generate(cfg)
    assert status[0].startswith("failed")
    assert not (tmp_path / "model_000" / ds.MANIFEST).exists()
    assert not list((tmp_path / "model_000").glob("*.part"))


# ---------------------------------------------------------------- sweep


def test_sweep_row_counts(full, tmp_path):
    cfg = SweepConfig(max_iterations=2, working_spacing=8.0)
    rows = run_sweep(full, cfg, out=tmp_path)
    counts = {}
    for r in rows:
        counts[r["pair"]] = counts.get(r["pair"], 0) + 1
    assert counts == {"CT->CT": 18, "CBCT->CT": 12, "MRI->CT": 12}
    assert all(r["status"] == "ok" for r in rows)
    back = read_rows(tmp_path / "sweep.csv")
    assert len(back) == 42
    assert [(r["pair"], r["metric"], r["grid_spacing"]) for r in back] == \
        [(r["pair"], r["metric"], r["grid_spacing"]) for r in rows]
    assert (tmp_path / "sweep.csv").read_text().startswith("# schema: sweep v1\n")
    with open(tmp_path / "sweep_summary.csv") as fh:
        fh.readline()
        summary = list(csv.DictReader(fh))
    assert len(summary) == 42
    assert {"post_mean", "post_p10", "post_p90"} <= set(summary[0])
    assert {r["metric"] for r in summary if r["pair"] == "MRI->CT"} == {"NC", "MMI"}


def test_sweep_numbers_are_deterministic(full, tmp_path):
    cfg = SweepConfig(pairs=("CT",), metrics={"CT": ["MS"]}, grid_spacings=(90.0,),
                      max_iterations=3, working_spacing=8.0)
    a = run_sweep(full, cfg, out=tmp_path / "a")
    b = run_sweep(full, cfg, out=tmp_path / "b")
    drop = lambda rows: [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]
    assert drop(a) == drop(b)


def test_missing_volume_flags_rows_not_abort(tmp_path):
    grid = tuple(tuple(a) for a in COARSE)
    generate(DatasetConfig(n_models=1, modalities=("CT", "CBCT"), grid=grid, output=str(tmp_path)))
    (tmp_path / "model_000" / "cbct_inhale.rvol").unlink()
    conf = tmp_path / "s.json"
    conf.write_text(json.dumps({"pairs": ["CT", "CBCT"], "grid_spacings": [90.0], "max_iterations": 2,
                                "working_spacing": 8.0}))
    code = main(["sweep", "--dataset", str(tmp_path), "--config", str(conf), "--out", str(tmp_path / "s")])
    assert code == EXIT_PARTIAL
    rows = read_rows(tmp_path / "s" / "sweep.csv")
    status = {(r["pair"], r["metric"]): r["status"] for r in rows}
    assert status[("CT->CT", "MS")] == "ok"
    assert status[("CBCT->CT", "MMI")].startswith("failed")
    assert np.isnan([r["post_dsc"] for r in rows if r["pair"] == "CBCT->CT"]).all()


@pytest.mark.parametrize("doc", [
    {"pairs": ["MRI"], "metrics": {"MRI": ["MS"]}},
    {"pairs": ["CBCT"], "metrics": {"CBCT": ["MS", "NC"]}},
    {"pairs": ["PET"]},
    {"grid_spacings": [0.0]},
    {"learning_rate": -1.0},
])
def test_bad_sweep_config_exits_1(full, tmp_path, doc):
    p = tmp_path / "s.json"
    p.write_text(json.dumps(doc))
    assert main(["sweep", "--dataset", str(full), "--config", str(p), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_sweep_on_empty_dir_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        run_sweep(tmp_path, SweepConfig(), out=tmp_path / "o")


# ---------------------------------------------------------------- evaluate


def test_evaluate_noise_magnitudes_match_targets(full, tmp_path):
    reports = evaluate_dataset(full, out=tmp_path)
    assert len(reports) == 6
    table = read_table(tmp_path / "table.csv")
    assert 37 <= float(table["nm"]["CT_mean"]) <= 41
    assert 50 <= float(table["nm"]["CBCT_mean"]) <= 54
    for m in ("CT", "CBCT", "MRI"):
        assert (tmp_path / f"histogram_{m}.csv").exists()
        assert (tmp_path / f"nps_{m}.csv").exists()
    doc = json.loads((tmp_path / "model_000_ct_exhale.json").read_text())
    assert set(doc["metrics"]) >= {"mae", "ssim", "fsim", "epr", "egr", "nm", "histcc"}


def test_evaluate_noiseless_dataset_has_zero_nm(tmp_path):
    noise = {m: {"magnitude": 0.0, "radial_profile": [[0.0, 1.0], [1.0, 1.0]]} for m in ("CT", "CBCT", "MRI")}
    conf = write_config(tmp_path / "c.json", noise=noise)
    assert main(["generate", "--config", conf, "--out", str(tmp_path / "ds")]) == EXIT_OK
    evaluate_dataset(tmp_path / "ds", out=tmp_path / "ev")
    table = read_table(tmp_path / "ev" / "table.csv")
    for m in ("CT", "CBCT", "MRI"):
        assert float(table["nm"][f"{m}_mean"]) == pytest.approx(0.0, abs=1e-9)
        assert float(table["mae"][f"{m}_mean"]) == pytest.approx(0.0, abs=1e-9)


def test_evaluate_against_identical_reference(full, tmp_path):
    assert main(["evaluate", "--dataset", str(full), "--reference", str(full),
                 "--out", str(tmp_path)]) == EXIT_OK
    for f in tmp_path.glob("model_*.json"):
        m = json.loads(f.read_text())["metrics"]
        assert m["mae"] == pytest.approx(0.0, abs=1e-12)
        assert m["ssim"] == pytest.approx(1.0, abs=1e-9)
        assert m["fsim"] == pytest.approx(1.0, abs=1e-9)
        assert m["histcc"] == pytest.approx(1.0, abs=1e-9)


def test_evaluate_skips_missing_volume(tmp_path, caplog):
    generate(DatasetConfig(n_models=1, modalities=("CT",), grid=tuple(tuple(a) for a in SMALL),
                           output=str(tmp_path)))
    os.remove(tmp_path / "model_000" / "ct_inhale.rvol")
    reports = evaluate_dataset(tmp_path, out=tmp_path / "ev")
    assert [r.volume for r in reports] == ["model_000/ct_exhale"]
    assert "skipping" in caplog.text


# ---------------------------------------------------------------- losses


def test_losses_subcommand(full, capsys):
    a = str(full / "model_000" / "ct_exhale.rvol")
    assert main(["losses", a, a, "--weights", "mri"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["intensity"] == 0.0 and out["gdl"] == 0.0 and out["weighted"] == 0.0
    b = str(full / "model_000" / "ct_inhale.rvol")
    main(["losses", a, b, "--slice", "3"])
    out = json.loads(capsys.readouterr().out)
    assert out["slice"] == 3
    assert out["weighted"] == pytest.approx(10.0 * out["intensity"] + 5.0 * out["gdl"])


def test_losses_geometry_mismatch_exits_1(full, tmp_path):
    generate(DatasetConfig(n_models=1, modalities=("CT",), grid=tuple(tuple(a) for a in COARSE),
                           output=str(tmp_path)))
    a = str(full / "model_000" / "ct_exhale.rvol")
    b = str(tmp_path / "model_000" / "ct_exhale.rvol")
    assert main(["losses", a, b]) == EXIT_CONFIG
