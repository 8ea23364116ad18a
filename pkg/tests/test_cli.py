import json
import numpy as np
import pytest
import yaml

from pcfusion.cli import build_parser, main
from pcfusion.geometry import io as gio

SMALL_PIPELINE = {
    "seed": 11,
    "unit": "m",
    "stages": [
        {"scan": {"mesh": "bunny", "views": 6, "stride": 8, "perturb": [0, 1], "out_dir": "scans"}},
        {"preprocess": {"inputs": ["scans/scan_*.ply"], "outlier_k": 10, "std_ratio": 3.0, "out_dir": "clean"}},
        {"register": {"method": "refined-pose-graph", "scans": ["clean/scan_*.ply"],
                      "init": "scans/perturbed_poses.json", "out": "fused.ply", "out_poses": "est_poses.json"}},
        {"measure": {"metric": "cloud-to-mesh", "query": "fused.ply", "reference": "scans/mesh.obj",
                     "out": "report.json"}},
    ],
}


def write_config(path, cfg):
    path.write_text(yaml.safe_dump(cfg, sort_keys=False))
    return path


def help_text(capsys, *words):
    with pytest.raises(SystemExit) as exc:
        main([*words, "--help"])
    assert exc.value.code == 0
    return capsys.readouterr().out


@pytest.mark.parametrize("words,flags", [
    (("register",), ["--method", "--voxel-size", "--distance-mult", "--prune-div", "--init", "--out",
                     "--out-poses", "--config", "--unit"]),
    (("measure",), ["--metric", "--query", "--reference", "--k", "--squared", "--out", "--per-point"]),
    (("eval", "registration"), ["--mesh", "--ranges", "--methods", "--reps", "--seed", "--out"]),
    (("eval", "metrics"), ["--shapes", "--sweeps", "--reps", "--out"]),
    (("preprocess",), ["--crop", "--outlier-k", "--std-ratio"]),
    (("scan",), ["--mesh", "--views", "--stride", "--perturb", "--seed"]),
    (("synth", "shape"), ["--kind", "--noise-std", "--hole-radius", "--sampling-factor", "--seed"]),
    (("convert",), ["--ascii", "--float32"]),
    (("run",), ["--workdir", "--seed"]),
])
def test_help_documents_flags(capsys, words, flags):
    text = help_text(capsys, *words)
    for f in flags:
        assert f in text


def test_every_subcommand_has_help(capsys):
    for words in [("synth", "mesh"), ("report",), ("replay",)]:
        assert "usage" in help_text(capsys, *words)


def test_parser_builds():
    assert build_parser().prog


# --------------------------------------------------------------------------- single commands

def test_synth_shape_deterministic(tmp_path):
    args = ["synth", "shape", "--kind", "sine", "--noise-std", "0.02", "--hole-radius", "0.2", "--seed", "4"]
    assert main([*args, "--out-dir", str(tmp_path / "a")]) == 0
    assert main([*args, "--out-dir", str(tmp_path / "b")]) == 0
    for name in ("reference.ply", "test.ply", "reference.obj", "meta.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_measure_plane_fixture(tmp_path):
    assert main(["synth", "shape", "--out-dir", str(tmp_path)]) == 0
    out = tmp_path / "r.json"
    assert main(["measure", "--metric", "chamfer", "--query", str(tmp_path / "test.ply"),
                 "--reference", str(tmp_path / "reference.ply"), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["scalar"] == pytest.approx(0.5, abs=1e-9)


def test_unit_flag_scales_files_and_length_flags(tmp_path):
    # the same geometry written in millimetres gives the same answer in millimetres
    assert main(["synth", "shape", "--kind", "sine", "--seed", "2", "--out-dir", str(tmp_path / "m")]) == 0
    assert main(["synth", "shape", "--kind", "sine", "--seed", "2", "--unit", "mm",
                 "--out-dir", str(tmp_path / "mm")]) == 0
    a = gio.read_ply(tmp_path / "m" / "test.ply")[0].points
    b = gio.read_ply(tmp_path / "mm" / "test.ply")[0].points
    assert np.allclose(b, 1000 * a, rtol=1e-12, atol=1e-9)
    res = {}
    for unit in ("m", "mm"):
        d = tmp_path / unit
        assert main(["measure", "--metric", "plane-quadratic", "--query", str(d / "test.ply"),
                     "--reference", str(d / "reference.ply"), "--unit", unit, "--out", str(d / "r.json")]) == 0
        res[unit] = json.loads((d / "r.json").read_text())
    assert res["mm"]["unit"] == "mm"
    assert res["mm"]["scalar"] == pytest.approx(1000 * res["m"]["scalar"], rel=1e-9)


def test_measure_per_point_field(tmp_path):
    main(["synth", "shape", "--out-dir", str(tmp_path)])
    pp = tmp_path / "pp.ply"
    assert main(["measure", "--metric", "cloud-to-mesh", "--query", str(tmp_path / "test.ply"),
                 "--reference", str(tmp_path / "reference.obj"), "--out", str(tmp_path / "r.json"),
                 "--per-point", str(pp)]) == 0
    cloud, extras = gio.read_ply(pp)
    assert np.allclose(extras["distance"], 0.5, atol=1e-9) and len(cloud) == len(extras["distance"])


def test_config_file_with_flag_override(tmp_path):
    main(["synth", "shape", "--out-dir", str(tmp_path)])
    cfg = write_config(tmp_path / "m.yaml", {"metric": "hausdorff", "query": str(tmp_path / "test.ply"),
                                             "reference": str(tmp_path / "reference.ply"),
                                             "out": str(tmp_path / "r.json")})
    assert main(["measure", "--config", str(cfg), "--metric", "plane-lsq"]) == 0
    assert json.loads((tmp_path / "r.json").read_text())["metric"] == "plane-lsq"


def test_config_unknown_metric_is_user_error(tmp_path, capsys):
    cfg = write_config(tmp_path / "m.yaml", {"metric": "cosine"})
    assert main(["measure", "--config", str(cfg)]) == 1
    assert "metric" in capsys.readouterr().err


def test_unknown_flag_is_user_error(capsys):
    assert main(["measure", "--bogus"]) == 1


def test_missing_input_is_user_error(tmp_path, capsys):
    assert main(["measure", "--metric", "chamfer", "--query", str(tmp_path / "nope.ply"),
                 "--reference", str(tmp_path / "nope.ply")]) == 1
    assert "nope.ply" in capsys.readouterr().err


def test_registration_failure_exit_code(tmp_path, capsys):
    from test_icp import corner
    c = corner(0.004)
    gio.write_ply(tmp_path / "a.ply", c)
    gio.write_ply(tmp_path / "b.ply", c)
    init = {"poses": [np.eye(4).tolist(), [[1, 0, 0, 10.0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]]}
    (tmp_path / "init.json").write_text(json.dumps(init))
    rc = main(["register", str(tmp_path / "a.ply"), str(tmp_path / "b.ply"), "--method", "pose-graph",
               "--init", str(tmp_path / "init.json"),
               "--out", str(tmp_path / "f.ply"), "--out-poses", str(tmp_path / "p.json")])
    assert rc == 2
    assert "GraphConstructionFailure" in capsys.readouterr().err


# --------------------------------------------------------------------------- convert

def test_convert_ply_roundtrip_float32(tmp_path):
    main(["synth", "shape", "--kind", "slope", "--out-dir", str(tmp_path)])
    src = tmp_path / "test.ply"
    assert main(["convert", str(src), str(tmp_path / "a.ply"), "--ascii", "--float32"]) == 0
    assert main(["convert", str(tmp_path / "a.ply"), str(tmp_path / "b.ply"), "--float32"]) == 0
    assert main(["convert", str(tmp_path / "b.ply"), str(tmp_path / "c.ply"), "--ascii", "--float32"]) == 0
    assert tmp_path.joinpath("a.ply").read_bytes().startswith(b"ply\nformat ascii")
    a, c = gio.read_ply(src)[0], gio.read_ply(tmp_path / "c.ply")[0]
    assert np.allclose(a.points, c.points, atol=1e-6, rtol=0)


def test_convert_obj_to_stl(tmp_path):
    main(["synth", "mesh", "--kind", "triangular", "--out", str(tmp_path / "m.obj")])
    assert main(["convert", str(tmp_path / "m.obj"), str(tmp_path / "m.stl")]) == 0
    assert len(gio.read_mesh(tmp_path / "m.obj")) == len(gio.read_mesh(tmp_path / "m.stl"))


def test_convert_truncated_ply(tmp_path, capsys):
    main(["synth", "shape", "--out-dir", str(tmp_path)])
    bad = tmp_path / "bad.ply"
    bad.write_bytes((tmp_path / "test.ply").read_bytes()[:60])
    assert main(["convert", str(bad), str(tmp_path / "x.ply")]) == 1
    err = capsys.readouterr().err
    assert "end_header" in err and "offset 60" in err


# --------------------------------------------------------------------------- pipeline

@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    out = []
    for name in ("a", "b"):
        d = tmp_path_factory.mktemp(name)
        cfg = write_config(d / "pipeline.yaml", SMALL_PIPELINE)
        out.append((d, main(["run", str(cfg)])))
    return out


def test_pipeline_smoke(pipeline_runs):
    d, rc = pipeline_runs[0]
    assert rc == 0
    for name in ("fused.ply", "report.json", "est_poses.json"):
        assert (d / name).exists()
    report = json.loads((d / "report.json").read_text())
    # the fused cloud sits in the frame of the perturbed first scan (at most 1 mm and 1 degree off)
    assert abs(report["mean"]) < 2e-3
    manifests = sorted((d / "manifests").glob("*.json"))
    assert [m.name for m in manifests] == ["00_scan.json", "01_preprocess.json", "02_register.json",
                                           "03_measure.json"]


def test_pipeline_rerun_identical(pipeline_runs):
    (a, _), (b, _) = pipeline_runs
    for rel in ("fused.ply", "est_poses.json", "report.json", "scans/scan_000.ply", "clean/scan_003.ply"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes()
    for m in sorted((a / "manifests").glob("*.json")):
        x = json.loads(m.read_text().replace(str(a), "<work>"))
        y = json.loads((b / "manifests" / m.name).read_text().replace(str(b), "<work>"))
        x.pop("timing"), y.pop("timing")
        assert x == y


def test_replay_reproduces_outputs(pipeline_runs):
    (a, _), (b, _) = pipeline_runs
    for name, manifest in (("fused.ply", "02_register.json"), ("report.json", "03_measure.json")):
        (b / name).unlink()
        assert main(["replay", str(b / "manifests" / manifest)]) == 0
        assert (b / name).read_bytes() == (a / name).read_bytes()


def test_pipeline_stage_order_enforced(tmp_path, capsys):
    cfg = dict(SMALL_PIPELINE, stages=[SMALL_PIPELINE["stages"][3], SMALL_PIPELINE["stages"][0]])
    assert main(["run", str(write_config(tmp_path / "p.yaml", cfg))]) == 1


def test_pipeline_schema_error_names_field(tmp_path, capsys):
    stages = json.loads(json.dumps(SMALL_PIPELINE["stages"]))
    stages[3]["measure"]["metric"] = "cosine"
    rc = main(["run", str(write_config(tmp_path / "p.yaml", dict(SMALL_PIPELINE, stages=stages)))])
    assert rc == 1
    err = capsys.readouterr().err
    assert "stages" in err and "metric" in err


# --------------------------------------------------------------------------- eval and report

@pytest.fixture(scope="module")
def bench_csvs(tmp_path_factory):
    d = tmp_path_factory.mktemp("bench")
    assert main(["eval", "metrics", "--shapes", "plane,sine", "--sweeps", "noise", "--metrics", "chamfer,emd",
                 "--reps", "2", "--n-points", "200", "--out", str(d / "metrics.csv"),
                 "--timings", str(d / "metrics_t.csv")]) == 0
    return d


def test_eval_metrics_csv_deterministic(bench_csvs, tmp_path):
    assert main(["eval", "metrics", "--shapes", "plane,sine", "--sweeps", "noise", "--metrics", "chamfer,emd",
                 "--reps", "2", "--n-points", "200", "--out", str(tmp_path / "again.csv")]) == 0
    assert (tmp_path / "again.csv").read_bytes() == (bench_csvs / "metrics.csv").read_bytes()
    assert "runtime_s" in (bench_csvs / "metrics_t.csv").read_text()


def test_report_renders_figures(bench_csvs, pipeline_runs, tmp_path):
    d, _ = pipeline_runs[0]
    assert main(["report", "--metrics-csv", str(bench_csvs / "metrics.csv"),
                 "--measure-json", str(d / "report.json"), "--out-dir", str(tmp_path / "fig")]) == 0
    pngs = sorted(tmp_path.joinpath("fig").glob("*.png"))
    assert pngs and all(p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n" for p in pngs)


def test_report_needs_an_input(tmp_path, capsys):
    assert main(["report", "--out-dir", str(tmp_path)]) == 1
