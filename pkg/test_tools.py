"""
End-to-end checks of the command-line tools: artifacts, exit codes and
reproducibility.
"""
import json

import pytest

from cli import main
from core.habi import HijackProfile
from core.store import ArtifactStore
from tools.calibrate_profile import CalibrateProfileTool
from tools.pipeline import PipelineTool

SMALL_RUN = ["--scenes", "8", "--seed", "3"]


def run(command, out, *extra):
    return main([command, *SMALL_RUN, "--out", str(out), *extra])


@pytest.fixture
def ranked_dir(tmp_path):
    assert run("calibrate", tmp_path) == 0
    assert run("rank-heads", tmp_path, "--k", "8") == 0
    return tmp_path


def test_pipeline_is_byte_reproducible(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert run("pipeline", first) == 0
    assert run("pipeline", second) == 0
    for name in (ArtifactStore.PROFILE, ArtifactStore.REPORT, ArtifactStore.HEADS, ArtifactStore.SCENES):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_pipeline_reports_every_stage(tmp_path):
    result = PipelineTool().run({"scenes": 6, "seed": 3, "out": str(tmp_path)})
    assert result["success"]
    assert all(step["completed"] for step in result["pipeline_steps"].values())
    assert result["report"]["n_scenes"] == 6


def test_profile_load_save_is_identical(ranked_dir):
    store = ArtifactStore(ranked_dir)
    original = (ranked_dir / ArtifactStore.PROFILE).read_text()
    store.save_profile(store.load_profile(), "copy.json")
    assert (ranked_dir / "copy.json").read_text() == original


def test_calibrate_writes_artifacts(tmp_path):
    assert run("calibrate", tmp_path) == 0
    profile = HijackProfile.from_json((tmp_path / ArtifactStore.PROFILE).read_text())
    assert profile.meta.n_scenes == 8
    assert profile.meta.seed == 3
    assert profile.anchors
    assert profile.meta.warning is None
    assert profile.tau_r < 1.0
    header = (tmp_path / ArtifactStore.HISTOGRAMS).read_text().splitlines()[0]
    assert header == "bin_left,bin_right,count,population"
    assert (tmp_path / ArtifactStore.TRACES).exists()


def test_single_scene_calibration(tmp_path):
    assert main(["calibrate", "--scenes", "1", "--seed", "3", "--out", str(tmp_path)]) == 0


def test_rank_heads_records_k(ranked_dir):
    profile = HijackProfile.from_json((ranked_dir / ArtifactStore.PROFILE).read_text())
    assert profile.anchors
    assert len(profile.h_target) == 8
    lines = (ranked_dir / ArtifactStore.HEADS).read_text().splitlines()
    assert lines[0] == "layer,head,mean_nhar,total_visual_attention,har_real_mean,har_hal_mean"
    assert len(lines) == 17


def test_too_many_heads(tmp_path):
    assert run("calibrate", tmp_path) == 0
    assert run("rank-heads", tmp_path, "--k", "17") == 2


def test_generate_needs_ranked_profile(tmp_path):
    assert run("calibrate", tmp_path) == 0
    assert run("generate", tmp_path, "--alpha", "0.1") == 3


def test_generate_without_profile(tmp_path):
    assert run("generate", tmp_path) == 3


def test_zero_alpha_captions_match_baseline(ranked_dir):
    assert run("generate", ranked_dir, "--alpha", "0") == 0
    captions = json.loads((ranked_dir / ArtifactStore.CAPTIONS).read_text())
    for scene in captions["scenes"]:
        assert scene["intervened"] == scene["baseline"]


def test_penalize_only_mode(ranked_dir):
    assert run("generate", ranked_dir, "--beta", "0.5", "--alpha", "0") == 0
    captions = json.loads((ranked_dir / ArtifactStore.CAPTIONS).read_text())
    assert captions["config"]["mode"] == "penalize"


def test_generate_trace_dump(ranked_dir):
    assert run("generate", ranked_dir, "--trace") == 0
    lines = (ranked_dir / ArtifactStore.STEPS).read_text().splitlines()
    assert lines[0] == "scene_id,condition,step,token,label,har,nhar"
    assert len(lines) == 1 + 8 * 2 * 10


def test_eval_with_persistent_sets(ranked_dir):
    assert run("eval", ranked_dir, "--compare-persist", "--t", "5", "--ktop", "10") == 0
    report = json.loads((ranked_dir / ArtifactStore.REPORT).read_text())
    assert report["habi_vs_persist"] is not None
    assert report["config"]["t"] == 5
    assert (ranked_dir / ArtifactStore.SCENES).read_text().startswith("scene_id,condition,chair_hit,inert_share,nhar_mean")


def test_beta_out_of_range(ranked_dir):
    assert run("generate", ranked_dir, "--beta", "2") == 2


def test_unknown_schema_is_rejected(ranked_dir):
    path = ranked_dir / ArtifactStore.PROFILE
    path.write_text(path.read_text().replace("hijacklens.profile/1", "hijacklens.profile/2"))
    assert run("eval", ranked_dir) == 3


def test_empty_scene_directory(ranked_dir):
    empty = ranked_dir / "empty"
    empty.mkdir()
    assert run("eval", ranked_dir, "--scene-dir", str(empty)) == 2


def test_non_finite_scene_exits_numeric(tmp_path):
    scene_dir = tmp_path / "scenes"
    assert run("make-scenes", tmp_path, "--scene-dir", str(scene_dir)) == 0
    first = sorted(scene_dir.glob("scene_*.json"))[0]
    data = json.loads(first.read_text())
    data["embeddings"][0][0] = float("nan")
    first.write_text(json.dumps(data))
    assert run("calibrate", tmp_path, "--scene-dir", str(scene_dir)) == 4


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("calibrate", blocker / "sub") == 2


def test_scene_directory_matches_generated_scenes(tmp_path):
    scene_dir = tmp_path / "scenes"
    assert run("make-scenes", tmp_path, "--scene-dir", str(scene_dir)) == 0
    assert len(list(scene_dir.glob("scene_*.json"))) == 8

    generated, loaded = tmp_path / "generated", tmp_path / "loaded"
    assert run("calibrate", generated) == 0
    assert run("calibrate", loaded, "--scene-dir", str(scene_dir)) == 0
    assert (generated / ArtifactStore.PROFILE).read_bytes() == (loaded / ArtifactStore.PROFILE).read_bytes()


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("HIJACKLENS_SEED", "5")
    assert main(["calibrate", "--scenes", "4", "--out", str(tmp_path)]) == 0
    assert HijackProfile.from_json((tmp_path / ArtifactStore.PROFILE).read_text()).meta.seed == 5


def test_seed_flag_beats_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("HIJACKLENS_SEED", "5")
    assert run("calibrate", tmp_path) == 0
    assert HijackProfile.from_json((tmp_path / ArtifactStore.PROFILE).read_text()).meta.seed == 3


def test_malformed_environment_seed(tmp_path, monkeypatch):
    monkeypatch.setenv("HIJACKLENS_SEED", "abc")
    assert main(["calibrate", "--scenes", "4", "--out", str(tmp_path)]) == 2


def test_tool_reports_invalid_input():
    result = CalibrateProfileTool().run({"scenes": 0})
    assert not result["success"]
    assert result["exit_code"] == 2
