from __future__ import annotations

import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from shortcut_audit import __version__
from shortcut_audit.cli import main
from shortcut_audit.pipeline import STAGES

SYNTH = ["--classes", "3", "--flows", "30", "--seed", "2", "--packets", "5:8",
         "--shortcut", "sii_bijection", "--shortcut", "env_coupled_window",
         "--signal", "payload_length_profile", "--env", "lab", "--env", "wan:1.0"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert main(["synth", "-o", str(root), *SYNTH]) == 0
    return root


@pytest.fixture(scope="module")
def full_run(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run", "-c", str(dataset / "pipeline.toml"), "-o", str(out)]) == 0
    return out


def snapshot(d: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


def test_synth_outputs(dataset):
    assert (dataset / "manifest.json").exists() and (dataset / "pipeline.toml").exists()
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert set(manifest["planted"]) == {"sii_bijection", "env_coupled_window"}
    assert len(list(dataset.glob("*/*.pcap"))) == 6


def test_full_run_bundle(full_run):
    for stage in STAGES:
        body = json.loads((full_run / f"{stage}.json").read_text())
        prov = body["provenance"]
        assert prov["stage"] == stage and prov["version"] == __version__ and prov["seed"] == 2
        assert len(prov["config_hash"]) == 64
    summary = json.loads((full_run / "summary.json").read_text())
    assert summary["candidates"][0]["field"] == "ip.src"
    assert summary["candidates"][0]["category"] == "DataLeakage"
    assert {s["field"] for s in summary["task_agnostic"]} >= {"tcp.window_size"}
    assert summary["accuracy"]["baseline"] == 1.0
    for name in ("ami_topk.svg", "accuracy.svg", "kl_tcp.window_size.svg", "ami.csv", "accuracy.csv",
                 "split_audit.json", "densities.csv"):
        assert (full_run / name).exists(), name


def test_rerun_is_noop(dataset, full_run, capsys):
    before = snapshot(full_run)
    mtimes = {p.name: p.stat().st_mtime_ns for p in full_run.iterdir() if p.suffix == ".json"}
    assert main(["run", "-c", str(dataset / "pipeline.toml"), "-o", str(full_run), "--stages", *STAGES]) == 0
    assert capsys.readouterr().out.count("up to date") == len(STAGES)
    assert snapshot(full_run) == before
    for stage in STAGES:
        assert (full_run / f"{stage}.json").stat().st_mtime_ns == mtimes[f"{stage}.json"]


def test_changed_config_refused_then_forced(dataset, full_run, tmp_path, capsys):
    out = tmp_path / "copy"
    shutil.copytree(full_run, out)
    cfg = str(dataset / "pipeline.toml")
    assert main(["rank", "-c", cfg, "-o", str(out), "-k", "3"]) == 2
    assert "refusing" in capsys.readouterr().err
    assert main(["rank", "-c", cfg, "-o", str(out), "-k", "3", "--force"]) == 0
    rank = json.loads((out / "rank.json").read_text())
    assert sum(e["candidate"] for e in rank["entries"]) == 3
    # downstream artifacts now belong to a different rank output
    assert main(["validate", "-c", cfg, "-o", str(out), "-k", "3"]) == 2


def test_single_stage_outputs_only(dataset, full_run, tmp_path):
    out = tmp_path / "partial"
    out.mkdir()
    for name in ("extract.json", "records.ndjson", "encode.json", "matrix.json", "matrix_values.csv",
                 "matrix_valid.csv"):
        shutil.copy(full_run / name, out / name)
    before = set(p.name for p in out.iterdir())
    assert main(["rank", "-c", str(dataset / "pipeline.toml"), "-o", str(out)]) == 0
    assert set(p.name for p in out.iterdir()) - before == {"rank.json", "ami.csv", "ami_topk.svg"}


def test_dependency_error_names_missing_stage(dataset, full_run, tmp_path, capsys):
    out = tmp_path / "dep"
    out.mkdir()
    for name in ("extract.json", "records.ndjson", "encode.json", "matrix.json", "matrix_values.csv",
                 "matrix_valid.csv"):
        shutil.copy(full_run / name, out / name)
    assert main(["validate", "-c", str(dataset / "pipeline.toml"), "-o", str(out)]) == 1
    assert "'rank'" in capsys.readouterr().err
    assert not (out / "validate.json").exists()


def test_stage_failure_keeps_prior_artifacts(dataset, full_run, tmp_path, capsys):
    out = tmp_path / "fail"
    out.mkdir()
    shutil.copy(full_run / "extract.json", out / "extract.json")
    (out / "records.ndjson").write_text("")
    assert main(["encode", "-c", str(dataset / "pipeline.toml"), "-o", str(out)]) == 1
    assert "error" in capsys.readouterr().err
    assert (out / "extract.json").read_bytes() == (full_run / "extract.json").read_bytes()
    assert not (out / "encode.json").exists()


def test_config_errors_exit_2(dataset, tmp_path):
    assert main(["rank", "-c", str(tmp_path / "missing.toml")]) == 2
    assert main(["rank", "-c", str(dataset / "pipeline.toml"), "--set", "ranker.k=0"]) == 2
    assert main(["occlude", "-c", str(dataset / "pipeline.toml"), "--occlusion", "bad"]) == 2
    assert main(["synth", "-o", str(tmp_path / "s"), "--classes", "2"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["run", "--stages", "nonsense"])
    assert exc.value.code == 2


def test_external_dissector_path(dataset, fake_tshark, tmp_path):
    out = tmp_path / "ext"
    args = ["-c", str(dataset / "pipeline.toml"), "-o", str(out)]
    assert main(["extract", *args, "--dissector", "external", "--tshark", fake_tshark]) == 0
    extract = json.loads((out / "extract.json").read_text())
    assert extract["dissector"] == "external" and extract["records"] > 0
    assert main(["run", *args, "--stages", "encode", "rank", "--set", "dissector.mode='external'",
                 "--set", f"dissector.binary='{fake_tshark}'"]) == 0
    rank = json.loads((out / "rank.json").read_text())
    assert rank["entries"][0]["field"] == "ip.src"


def test_inputs_from_flags(dataset, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    pcaps = sorted((dataset / "lab").glob("*.pcap"))
    args = ["run", "-o", "o", "--stages", "extract", "encode", "rank"]
    for p in pcaps:
        args += ["--input", str(p), p.stem]
    assert main(args) == 0
    assert json.loads((tmp_path / "o" / "rank.json").read_text())["n_classes"] == 3


def test_occlusion_flag_and_report(dataset, full_run, tmp_path):
    out = tmp_path / "occ"
    out.mkdir()
    for name in ("extract.json", "records.ndjson"):
        shutil.copy(full_run / name, out / name)
    assert main(["occlude", "-c", str(dataset / "pipeline.toml"), "-o", str(out),
                 "--occlusion", "ttl:zero:ip.ttl", "--occlusion", "seq:relative:SEQ_ACK"]) == 0
    occ = json.loads((out / "occlude.json").read_text())
    assert [s["name"] for s in occ["strategies"]] == ["ttl", "seq"]
    assert (out / "occluded_ttl.pcap").exists()
    assert main(["report", "-c", str(dataset / "pipeline.toml"), "-o", str(out),
                 "--occlusion", "ttl:zero:ip.ttl", "--occlusion", "seq:relative:SEQ_ACK"]) == 0
    assert "occlude" in json.loads((out / "summary.json").read_text())["stages"]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "shortcut_audit", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and __version__ in proc.stdout
