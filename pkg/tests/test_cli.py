from __future__ import annotations

import hashlib
import json
import socket
from pathlib import Path

import pytest

from conftest import TRUTH, write_drive
from drivescene.cli import main
from drivescene.core import SceneLabel, TrafficLight, serialize_label, write_jsonl
from drivescene.inference import mock_inference_server
from drivescene.pipeline import PipelineConfig, load_config


def run_json(capsys) -> dict:
    out = capsys.readouterr().out
    summary = json.loads(out[: out.index("}\n") + 1])
    return json.loads((Path(summary["run_dir"]) / "run.json").read_text())


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def file_digest(p: Path) -> str:
    return hashlib.sha256(p.read_bytes()).hexdigest()


@pytest.fixture
def synth_refs(tmp_path, capsys) -> Path:
    assert main(["synthesize", "--count", "30", "--seed", "3", "--out", str(tmp_path / "gen")]) == 0
    meta = run_json(capsys)
    return tmp_path / "gen" / f"synthesize-{meta['config_hash'][:12]}-seed3" / "labels.jsonl"


def test_evaluate_preds_equal_refs(tmp_path, capsys, synth_refs):
    rc = main(["evaluate", "--refs", str(synth_refs), "--preds", str(synth_refs), "--out", str(tmp_path / "runs")])
    assert rc == 0
    meta = run_json(capsys)
    assert meta["status"] == "ok"
    assert meta["average"] == pytest.approx(1.0, abs=1e-12)
    assert {"report.json", "table.txt"} <= set(meta["artifacts"])


def test_mine_simulated_restores_corruption(tmp_path, capsys):
    assert main(["mine", "--simulate", "500", "--out", str(tmp_path)]) == 0
    meta = run_json(capsys)
    stats = json.loads((tmp_path / Path(next(iter(tmp_path.iterdir())).name) / "stats.json").read_text())
    assert stats["restored_fraction"] >= 0.9
    assert stats["kept"] + stats["dropped"] == stats["total"] == 500
    assert meta["stage_order"] == ["temporal_vote", "motion_consistency", "fusion"]
    assert meta["config_hash"] and meta["seed"] == 0
    assert set(meta["versions"]) == {"drivescene", "python", "numpy"}


@pytest.mark.parametrize(
    "argv",
    [
        ["mine", "--simulate", "120"],
        ["synthesize", "--count", "12"],
        ["quantize", "--instances", "2"],
    ],
)
def test_same_seed_same_digests(tmp_path, capsys, argv):
    metas = []
    for _ in range(2):
        assert main(argv + ["--seed", "11", "--out", str(tmp_path)]) == 0
        metas.append(run_json(capsys))
    assert metas[0]["artifacts"] == metas[1]["artifacts"]
    # second run lands in its own directory
    assert len(list(tmp_path.iterdir())) == 2


def test_different_seed_changes_artifacts(tmp_path, capsys):
    assert main(["synthesize", "--count", "5", "--seed", "1", "--out", str(tmp_path)]) == 0
    a = run_json(capsys)
    assert main(["synthesize", "--count", "5", "--seed", "2", "--out", str(tmp_path)]) == 0
    b = run_json(capsys)
    assert a["artifacts"] != b["artifacts"]


def test_distill_small(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"distill": {"teacher_corpus": 100, "teacher_steps": 30, "student_corpus": 20,
                                           "heldout_corpus": 20, "steps": 10, "seeds": 2}}))
    assert main(["distill", "--config", str(cfg), "--out", str(tmp_path / "runs")]) == 0
    meta = run_json(capsys)
    names = set(meta["artifacts"])
    assert {"seed0/loss_kd.csv", "seed1/loss_hard.csv", "soft_labels.bin", "soft_labels.bin.json", "results.json"} <= names


def test_quantize_npy_mode(tmp_path, capsys):
    import numpy as np

    from drivescene.quant import heavy_tailed_instance, load_quantized

    W, X = heavy_tailed_instance(0, d_out=8, d_in=64, samples=32)
    np.save(tmp_path / "w.npy", W)
    np.save(tmp_path / "x.npy", X)
    before = file_digest(tmp_path / "w.npy")
    rc = main(["quantize", "--weights", str(tmp_path / "w.npy"), "--calibration", str(tmp_path / "x.npy"),
               "--out", str(tmp_path / "runs")])
    assert rc == 0
    meta = run_json(capsys)
    run_dir = next((tmp_path / "runs").iterdir())
    result = json.loads((run_dir / "result.json").read_text())
    assert result["awq_error"] <= result["rtn_error"]
    assert load_quantized(run_dir / "quantized.bin").codes.shape == W.shape
    assert file_digest(tmp_path / "w.npy") == before
    assert meta["status"] == "ok"


def test_synthesize_pairs_mode(tmp_path, capsys):
    rows = [
        {"caption": "a red light at a junction", "signature": "s1", "label": None},
        {"caption": "a red light at a junction", "signature": "s2", "label": None},
        {"caption": "cones on a straight road", "signature": "s1", "label": None},
    ]
    write_jsonl(tmp_path / "pairs.jsonl", rows)
    assert main(["synthesize", "--pairs", str(tmp_path / "pairs.jsonl"), "--out", str(tmp_path / "runs")]) == 0
    run_json(capsys)
    run_dir = next((tmp_path / "runs").iterdir())
    stats = json.loads((run_dir / "filter_stats.json").read_text())
    assert stats["input"] == 3 and stats["kept"] == 1


def test_report_combines_reports(tmp_path, capsys, synth_refs):
    for _ in range(2):
        assert main(["evaluate", "--refs", str(synth_refs), "--preds", str(synth_refs), "--out", str(tmp_path / "ev")]) == 0
        capsys.readouterr()
    reports = sorted(str(p / "report.json") for p in (tmp_path / "ev").iterdir())
    assert main(["report", *reports, "--names", "first", "second", "--out", str(tmp_path / "rep")]) == 0
    out = capsys.readouterr().out
    assert "first" in out and "second" in out and "Average" in out


# --- errors -------------------------------------------------------------------

def test_unknown_config_key_exit_1(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"sed": 1}))
    assert main(["synthesize", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "sed" in capsys.readouterr().err
    assert not any(tmp_path.glob("synthesize-*"))


def test_missing_required_path_names_field(tmp_path, capsys):
    assert main(["evaluate", "--out", str(tmp_path)]) == 1
    assert "paths.refs" in capsys.readouterr().err
    assert main(["evaluate", "--refs", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == 1
    assert main(["mine", "--out", str(tmp_path)]) == 1


def test_bad_config_json_and_infeasible_generation(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["mine", "--config", str(bad), "--out", str(tmp_path)]) == 1
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"synth": {"generation": {"edge_length_m": [40, 60]}}}))
    assert main(["synthesize", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "synth.generation" in capsys.readouterr().err


def test_malformed_input_exit_1(tmp_path, capsys):
    refs = tmp_path / "refs.jsonl"
    refs.write_text('{"image_ref": "a", "text": "x"}\nnot json\n')
    assert main(["evaluate", "--refs", str(refs), "--preds", str(refs), "--out", str(tmp_path / "runs")]) == 1
    err = capsys.readouterr().err
    assert "line 2" in err
    meta = json.loads(next((tmp_path / "runs").glob("*/run.json")).read_text())
    assert meta["status"] == "error" and "line 2" in meta["error"]


def test_unreachable_endpoint_exit_2(tmp_path, capsys, synth_refs):
    url = f"http://127.0.0.1:{free_port()}"
    rc = main(["evaluate", "--refs", str(synth_refs), "--endpoint", url, "--out", str(tmp_path / "runs")])
    assert rc == 2
    err = capsys.readouterr().err
    assert "[inference]" in err and "ServiceUnavailable" in err
    meta = json.loads(next((tmp_path / "runs").glob("*/run.json")).read_text())
    assert meta["status"] == "error"


def test_endpoint_env_and_flag_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"endpoint": "http://file", "seed": 4}))
    assert load_config(cfg).endpoint == "http://file"
    monkeypatch.setenv("DRIVESCENE_ENDPOINT", "http://env")
    assert load_config(cfg).endpoint == "http://env"
    assert load_config(cfg, {"endpoint": "http://flag"}).endpoint == "http://flag"
    assert load_config(cfg, {"seed": None}).seed == 4


def test_config_hash_ignores_output_location():
    a = PipelineConfig(out="x", workers=2, endpoint="http://a")
    b = PipelineConfig(out="y", workers=8)
    assert a.digest() == b.digest()
    assert a.digest() != PipelineConfig(seed=1).digest()


# --- endpoint-backed runs ---------------------------------------------------------

def test_mine_via_endpoint_then_evaluate(tmp_path, capsys):
    frames, script, _ = write_drive(tmp_path / "in", 200, seed=5)
    before = {p.name: file_digest(p) for p in (tmp_path / "in").iterdir()}
    with mock_inference_server(script) as srv:
        rc = main(["mine", "--frames", str(tmp_path / "in/frames.jsonl"),
                   "--expert-labels", str(tmp_path / "in/expert.jsonl"),
                   "--endpoint", srv.url, "--out", str(tmp_path / "runs")])
        assert rc == 0
        mine_meta = run_json(capsys)
        assert len(srv.log) == len(frames)
        mine_dir = next((tmp_path / "runs").glob("mine-*"))
        rc = main(["evaluate", "--refs", str(mine_dir / "mined.jsonl"), "--endpoint", srv.url,
                   "--out", str(tmp_path / "runs")])
        assert rc == 0
        ev_meta = run_json(capsys)
    assert "vlm_responses.jsonl" in mine_meta["artifacts"]
    mined = [json.loads(line) for line in (mine_dir / "mined.jsonl").read_text().splitlines()]
    restored = sum(SceneLabel.from_dict(r["label"]).content() == TRUTH.content() for r in mined)
    assert restored == len(frames)
    # evaluation scores the raw (5% corrupted) responses, not the mined ones
    ev_dir = next((tmp_path / "runs").glob("evaluate-*"))
    preds = [json.loads(line) for line in (ev_dir / "predictions.jsonl").read_text().splitlines()]
    assert [p["text"] for p in preds] == [script[r["image_ref"]] for r in mined]
    assert ev_meta["average"] < 1.0
    assert {p.name: file_digest(p) for p in (tmp_path / "in").iterdir()} == before


def test_prompt_opt_with_mock(tmp_path, capsys):
    truth = SceneLabel(recommended_speed_kmh=30.0, traffic_light=TrafficLight.RED, obstacles_cones=True)
    wrong = SceneLabel(recommended_speed_kmh=50.0, traffic_light=TrafficLight.GREEN)

    def answer(prompt: str) -> str:
        return serialize_label(truth if "cone" in prompt.lower() else wrong)

    items = [{"image_ref": f"img{i}.jpg", "label": truth.to_dict(), "tags": ["cone"]} for i in range(4)]
    write_jsonl(tmp_path / "eval.jsonl", items)
    with mock_inference_server({it["image_ref"]: answer for it in items}) as srv:
        rc = main(["prompt-opt", "--eval-set", str(tmp_path / "eval.jsonl"), "--budget", "6",
                   "--endpoint", srv.url, "--out", str(tmp_path / "runs")])
    assert rc == 0
    run_json(capsys)
    summary = json.loads(next((tmp_path / "runs").glob("*/summary.json")).read_text())
    assert summary["final_score"] >= summary["initial_score"]
    assert summary["rounds"] == 6


def test_prompt_opt_needs_endpoint(tmp_path, capsys):
    write_jsonl(tmp_path / "eval.jsonl", [{"image_ref": "a", "label": TRUTH.to_dict()}])
    assert main(["prompt-opt", "--eval-set", str(tmp_path / "eval.jsonl"), "--out", str(tmp_path)]) == 1
    assert "endpoint" in capsys.readouterr().err
