import json

import numpy as np
import pytest

from gazemap.cli import build_parser, main
from gazemap.imaging import save_image
from gazemap.session import write_frames
from gazemap.synth import Event, SceneSpec, SessionScript, make_texture


def small_spec(seed=7):
    """Three views and a 1.4 s walk: keeps analyze at a few seconds."""
    scene = SceneSpec(seed=seed, n_views=3)
    c = {a: ((box[0] + box[2]) / 2, (box[1] + box[3]) / 2) for a, _, box in scene.aois}
    script = SessionScript((
        Event("fixate", 400, c["H1"]),
        Event("saccade", 80),
        Event("fixate", 400, c["H4"]),
        Event("saccade", 80),
        Event("fixate", 320, (160.0, 40.0)),
    ), seed=seed)
    return {"scene": scene.to_dict(), "script": script.to_dict()}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> build-registry -> annotate -> propagate on the small spec."""
    d = tmp_path_factory.mktemp("cli")
    (d / "spec.json").write_text(json.dumps(small_spec()))
    assert main(["synth", "--spec", str(d / "spec.json"), "--out", str(d / "syn"), "--deterministic"]) == 0
    assert main(["build-registry", "--frames", str(d / "syn/scene/refs"), "--out", str(d / "reg"),
                 "--poses", str(d / "syn/scene/poses.csv")]) == 0
    assert main(["annotate", "--registry", str(d / "reg"), "--aois", str(d / "syn/scene/aois.json")]) == 0
    assert main(["propagate", "--registry", str(d / "reg"), "--report", str(d / "prop.json")]) == 0
    return d


def test_build_registry_ten_frames(tmp_path, capsys):
    rng = np.random.default_rng(0)
    (tmp_path / "in").mkdir()
    for i in range(10):
        save_image(tmp_path / "in" / f"f{i:02d}.png", make_texture(rng, 64, 80))
    code, out, _ = run(capsys, "build-registry", "--frames", tmp_path / "in", "--out", tmp_path / "reg")
    assert code == 0 and "10 images" in out
    manifest = json.loads((tmp_path / "reg" / "manifest.json").read_text())
    assert [im["id"] for im in manifest["images"]] == [f"f{i:02d}" for i in range(10)]


def test_build_registry_errors(tmp_path, capsys):
    code, _, err = run(capsys, "build-registry", "--frames", tmp_path / "missing", "--out", tmp_path / "reg")
    assert code == 2 and "error:" in err
    (tmp_path / "in").mkdir()
    save_image(tmp_path / "in" / "ok.png", make_texture(np.random.default_rng(1), 64, 80))
    (tmp_path / "in" / "corrupt.png").write_bytes(b"\x89PNG broken")
    code, _, err = run(capsys, "build-registry", "--frames", tmp_path / "in", "--out", tmp_path / "reg")
    assert code == 2 and "corrupt.png" in err


def test_propagation_coverage(pipeline):
    rep = json.loads((pipeline / "prop.json").read_text())
    assert rep["coverage"]["covered"] == rep["coverage"]["total"] == 4
    manifest = json.loads((pipeline / "reg" / "manifest.json").read_text())
    assert len(manifest["aois"]) == 5
    assert all(len(a["boxes"]) >= 3 for a in manifest["aois"])


def test_annotate_and_propagate_errors(tmp_path, capsys, pipeline):
    code, _, _ = run(capsys, "build-registry", "--frames", pipeline / "syn/scene/refs", "--out", tmp_path / "reg")
    assert code == 0
    code, _, err = run(capsys, "propagate", "--registry", tmp_path / "reg")
    assert code == 2 and "NoSeeds" in err
    code, _, err = run(capsys, "annotate", "--registry", tmp_path / "reg", "--aoi", "H1", "--label", "x",
                       "--image", "base", "--box", "50,50,40,60")
    assert code == 2 and "InvertedBox" in err


def test_analyze(pipeline, tmp_path, capsys):
    code, out, _ = run(capsys, "analyze", "--registry", pipeline / "reg", "--frames", pipeline / "syn/frames",
                       "--gaze", pipeline / "syn/gaze.csv", "--out", tmp_path / "a.json", "--csv-dir", tmp_path / "csv",
                       "--deterministic")
    assert code == 0
    rep = json.loads((tmp_path / "a.json").read_text())
    truth = json.loads((pipeline / "syn/truth.json").read_text())
    assert rep["summary"]["n_localized"] == rep["summary"]["n_frames"] == truth["n_frames"]
    assert [d["aoi_id"] for d in rep["dwells"]] == [d["aoi_id"] for d in truth["dwells"]] == ["H1", "H4"]
    for got, want in zip(rep["dwells"], truth["dwells"]):
        assert abs(got["start_ms"] - want["start_ms"]) <= 40 and abs(got["end_ms"] - want["end_ms"]) <= 40
    assert rep["warnings"] == [] and "created_unix" not in rep
    assert rep["tool"]["name"] == "gazemap" and rep["config"]["session"]["min_dwell_ms"] == 240
    assert (tmp_path / "csv" / "dwell_table.csv").exists()
    assert "frames localized: 32/32" in out


def test_analyze_bad_gaze(pipeline, tmp_path, capsys):
    (tmp_path / "gaze.csv").write_text("t_ms,x_px,y_px,valid\n0,1,1,1\n10,2,2,1\n5,3,3,1\n")
    code, _, err = run(capsys, "analyze", "--registry", pipeline / "reg", "--frames", pipeline / "syn/frames",
                       "--gaze", tmp_path / "gaze.csv", "--out", tmp_path / "a.json")
    assert code == 2 and "NonMonotonicTimestamp" in err and "4" in err


def test_analyze_unlocalized_frames(pipeline, tmp_path, capsys):
    rng = np.random.default_rng(99)
    write_frames(tmp_path / "frames", [make_texture(rng, 240, 320) for _ in range(3)])
    (tmp_path / "gaze.csv").write_text("t_ms,x_px,y_px,valid\n" + "".join(f"{t},100,100,1\n" for t in range(0, 120, 10)))
    code, out, _ = run(capsys, "analyze", "--registry", pipeline / "reg", "--frames", tmp_path / "frames",
                       "--gaze", tmp_path / "gaze.csv", "--out", tmp_path / "a.json")
    assert code == 0 and "warning:" in out
    rep = json.loads((tmp_path / "a.json").read_text())
    assert rep["summary"]["n_localized"] == 0 and rep["dwells"] == [] and rep["warnings"]


def test_correlate_planted_linear(tmp_path, capsys):
    rng = np.random.default_rng(4)
    lines = ["worker_id,av_hri,sd_ms,ft_ms,fc,mfd_ms,roaft,fr"]
    for i, h in enumerate(rng.uniform(0.2, 1.0, 23).tolist()):
        lines.append(f"w{i},{h!r},{2 * h!r},{2 * h!r},{2 * h!r},{2 * h!r},{2 * h!r},{2 * h!r}")
    (tmp_path / "w.csv").write_text("\n".join(lines) + "\n")
    code, out, _ = run(capsys, "correlate", "--workers", tmp_path / "w.csv", "--out", tmp_path / "c.json",
                       "--csv", tmp_path / "c.csv")
    assert code == 0
    rows = json.loads((tmp_path / "c.json").read_text())["rows"]
    assert all(r["r"] == pytest.approx(1.0, abs=1e-12) and r["p"] == 0.0 and r["n"] == 23 for r in rows)
    (tmp_path / "few.csv").write_text(lines[0] + "\n" + "\n".join(lines[1:3]) + "\n")
    code, _, err = run(capsys, "correlate", "--workers", tmp_path / "few.csv", "--out", tmp_path / "c2.json")
    assert code == 2 and "TooFewWorkers" in err


def test_validate_reference_case(tmp_path, capsys):
    (tmp_path / "sys.json").write_text(json.dumps({"H1": 900, "H2": 235, "H3": 257, "H4": 1148, "H5": 1270}))
    (tmp_path / "man.csv").write_text("aoi_id,dwell_ms\nH1,744\nH2,248\nH3,248\nH4,992\nH5,992\n")
    code, out, _ = run(capsys, "validate", "--system", tmp_path / "sys.json", "--manual", tmp_path / "man.csv",
                       "--out", tmp_path / "v.json")
    assert code == 0 and "mean accuracy: 88%" in out
    assert json.loads((tmp_path / "v.json").read_text())["validation"]["mean_accuracy_pct"] == 88
    (tmp_path / "bad.json").write_text(json.dumps({"H9": 10}))
    code, _, err = run(capsys, "validate", "--system", tmp_path / "sys.json", "--manual", tmp_path / "bad.json")
    assert code == 2 and "KeyMismatch" in err


def test_synth_default_and_determinism(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(small_spec()))
    for name in ("a", "b"):
        assert run(capsys, "synth", "--spec", spec, "--out", tmp_path / name, "--deterministic", "--seed", 3)[0] == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) > 10
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_synth_builtin_default(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--out", tmp_path / "d")
    assert code == 0 and "10 views" in out
    assert json.loads((tmp_path / "d" / "truth.json").read_text())["dwells"]


def test_synth_non_invertible_warp(tmp_path, capsys):
    spec = small_spec()
    spec["scene"]["scale"] = [0.0, 0.0]
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    code, _, err = run(capsys, "synth", "--spec", tmp_path / "spec.json", "--out", tmp_path / "o")
    assert code == 2 and "InvalidWarpRange" in err


def test_help_shows_defaults(capsys):
    parser = build_parser()
    with pytest.raises(SystemExit) as exc:
        parser.parse_args(["analyze", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert "(default: 240.0)" in out and "(default: 25.0)" in out and "(default: 5)" in out


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["analyze"])
    assert exc.value.code == 2
