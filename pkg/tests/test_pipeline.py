"""End-to-end pipeline tests: staging, resume, corruption recovery, presets."""

import json
import subprocess

import pytest

from sftrecon.config import (
    PRESET_COMMITTEE_MULTI,
    PRESET_SINGLE_MULTI,
    PRESET_SINGLE_SINGLE,
    apply_preset,
)
from sftrecon.errors import ConfigError
from sftrecon.pipeline import (
    MANIFEST_FILE,
    STAGES,
    STAGE_FILES,
    PipelineError,
    load_manifest,
    resume,
    run,
    stage_path,
    verify_artifacts,
)
from sftrecon.report import conservation_holds
from sftrecon.runio import LockError, RunLock, read_json, read_jsonl, sha256_file

from conftest import make_run_config


def read_stage(run_dir, stage):
    return read_jsonl(stage_path(run_dir, stage))


def all_statuses(manifest):
    return {stage: manifest["stages"][stage]["status"] for stage in STAGES}


# --- full run ---


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("full")
    config = make_run_config(tmp_path, n_instructions=12)
    result = run(config)
    return config, result


def test_all_stages_complete(full_run):
    config, result = full_run
    statuses = all_statuses(result.manifest)
    assert statuses == {stage: "done" for stage in STAGES}
    for stage in STAGES:
        for name in STAGE_FILES[stage]:
            assert (result.run_dir / name).exists()


def test_stage_counts_follow_committee_shape(full_run):
    config, result = full_run
    instructions = read_stage(result.run_dir, "elicit")
    candidates = read_stage(result.run_dir, "respond")
    votes = read_stage(result.run_dir, "judge")
    pairs = read_stage(result.run_dir, "select")
    assert len(instructions) == 12
    assert len(candidates) == 12 * 3 * 3  # K models x L samples
    ok = [c for c in candidates if c["finish_reason"] != "error"]
    assert len(votes) == len(ok) * 3  # every judge scores every ok candidate
    dropped = result.manifest["stages"]["select"]["stats"]["dropped"]
    assert len(pairs) + len(dropped) == 12


def test_manifest_digests_match_files(full_run):
    config, result = full_run
    for stage in STAGES:
        entry = result.manifest["stages"][stage]
        assert entry["records"] is not None
        for name, digest in entry["files"].items():
            assert sha256_file(result.run_dir / name) == digest
    assert result.train_digest == result.manifest["stages"]["mix"]["digest"]
    assert result.stage_digest("elicit") == result.manifest["stages"]["elicit"]["digest"]


def test_mix_stats_are_consistent(full_run):
    config, result = full_run
    stats = result.manifest["stages"]["mix"]["stats"]
    assert stats["total"] == stats["domain"] + stats["recon"]
    train = read_stage(result.run_dir, "mix")
    origins = [row["origin"] for row in train]
    assert origins.count("domain") == stats["domain"]
    assert origins.count("recon") == stats["recon"]
    assert len(train) == stats["total"]


def test_report_is_conserving_and_complete(full_run):
    config, result = full_run
    report = read_json(result.run_dir / "report.json")
    assert conservation_holds(report)
    assert report["counts"]["instructions"] == 12
    win_rates = report["committee"]["win_rates"]
    assert set(win_rates) == {"0", "1", "2"}
    assert sum(win_rates.values()) == pytest.approx(1.0, abs=1e-9)
    assert report["committee"]["model_ids"] == result.manifest["committee"]
    text = (result.run_dir / "report.txt").read_text(encoding="utf-8")
    assert "Dataset report" in text
    csv_text = (result.run_dir / "category_histogram.csv").read_text(encoding="utf-8")
    assert csv_text.startswith("category,count,percent\n")


def test_rerun_in_same_dir_is_refused(full_run):
    config, result = full_run
    with pytest.raises(PipelineError, match="resume it instead"):
        run(config)


def test_resume_of_finished_run_is_a_noop(full_run):
    config, result = full_run
    train = stage_path(result.run_dir, "mix")
    before = train.stat().st_mtime_ns
    resumed = resume(result.run_dir)
    assert train.stat().st_mtime_ns == before  # nothing was rewritten
    assert resumed.train_digest == result.train_digest
    assert all_statuses(resumed.manifest) == all_statuses(result.manifest)


# --- determinism ---


def test_identical_configs_reproduce_every_artifact(tmp_path):
    first = run(make_run_config(tmp_path, n_instructions=8, run_name="a"))
    second = run(make_run_config(tmp_path, n_instructions=8, run_name="b"))
    for stage in STAGES:
        assert first.manifest["stages"][stage]["digest"] == second.manifest["stages"][stage]["digest"]
    assert (first.run_dir / "train.jsonl").read_bytes() == (second.run_dir / "train.jsonl").read_bytes()


def test_different_seed_changes_train_set(tmp_path):
    first = run(make_run_config(tmp_path, n_instructions=8, run_name="a", seed=1))
    second = run(make_run_config(tmp_path, n_instructions=8, run_name="b", seed=2))
    assert first.train_digest != second.train_digest


# --- interruption and resume ---


def test_kill_after_judging_then_resume_matches_uninterrupted_run(tmp_path):
    # Twin A runs straight through; twin B stops after the judge stage
    # (as if the process died there) and is resumed.
    straight = run(make_run_config(tmp_path, n_instructions=8, run_name="straight"))

    config = make_run_config(tmp_path, n_instructions=8, run_name="interrupted")
    partial = run(config, stop_after="judge")
    statuses = all_statuses(partial.manifest)
    assert statuses["judge"] == "done"
    assert statuses["select"] == statuses["mix"] == statuses["report"] == "pending"
    assert not stage_path(partial.run_dir, "mix").exists()

    resumed = resume(partial.run_dir)
    assert all_statuses(resumed.manifest) == {stage: "done" for stage in STAGES}
    assert resumed.train_digest == straight.train_digest
    for stage in STAGES:
        assert resumed.manifest["stages"][stage]["digest"] == straight.manifest["stages"][stage]["digest"]


def test_stop_after_each_stage_then_resume(tmp_path):
    config = make_run_config(tmp_path, n_instructions=6)
    result = run(config, stop_after="elicit")
    assert all_statuses(result.manifest)["respond"] == "pending"
    for stage in STAGES[1:]:
        result = resume(config.run_dir, stop_after=stage)
        assert result.manifest["stages"][stage]["status"] in ("done", "skipped")
    assert all_statuses(result.manifest) == {stage: "done" for stage in STAGES}


def test_resume_report_rebuilds_selection_from_manifest(tmp_path):
    config = make_run_config(tmp_path, n_instructions=8)
    run(config, stop_after="mix")
    result = resume(config.run_dir)  # report stage runs in a fresh process state
    report = read_json(result.run_dir / "report.json")
    stats = result.manifest["stages"]["select"]["stats"]
    assert report["counts"]["dropped"] == len(stats["dropped"])
    assert report["scores"]["tie_count"] == stats["tie_count"]
    assert conservation_holds(report)


def test_stop_after_rejects_unknown_stage(tmp_path):
    config = make_run_config(tmp_path, n_instructions=4)
    with pytest.raises(ConfigError, match="stop_after must be one of"):
        run(config, stop_after="deploy")


def test_run_requires_run_dir(tmp_path):
    config = make_run_config(tmp_path, n_instructions=4)
    config.run_dir = None
    with pytest.raises(ConfigError, match="run_dir is required"):
        run(config)


def test_resume_requires_manifest(tmp_path):
    with pytest.raises(PipelineError, match="nothing to resume"):
        resume(tmp_path / "empty")


def test_resume_refuses_changed_config(tmp_path):
    config = make_run_config(tmp_path, n_instructions=4)
    run(config, stop_after="elicit")
    config_path = config.run_dir / "config.json"
    data = json.loads(config_path.read_text(encoding="utf-8"))
    data["seed"] = data["seed"] + 1
    config_path.write_text(json.dumps(data), encoding="utf-8")
    with pytest.raises(PipelineError, match="start a fresh run"):
        resume(config.run_dir)


# --- artifact verification ---


def test_corrupted_artifact_invalidates_suffix_and_recovers(tmp_path):
    config = make_run_config(tmp_path, n_instructions=8)
    original = run(config)
    original_digests = {
        stage: original.manifest["stages"][stage]["digest"] for stage in STAGES
    }

    candidates_path = stage_path(config.run_dir, "respond")
    with open(candidates_path, "a", encoding="utf-8") as handle:
        handle.write('{"sneaky": "extra line"}\n')

    manifest = load_manifest(config.run_dir)
    invalidated = verify_artifacts(config.run_dir, manifest)
    assert invalidated == ["respond", "judge", "select", "mix", "report"]
    assert manifest["stages"]["elicit"]["status"] == "done"

    recovered = resume(config.run_dir)
    assert all_statuses(recovered.manifest) == {stage: "done" for stage in STAGES}
    for stage in STAGES:
        assert recovered.manifest["stages"][stage]["digest"] == original_digests[stage]
    assert sha256_file(candidates_path) == original_digests["respond"]


def test_deleted_artifact_triggers_stage_rerun(tmp_path):
    config = make_run_config(tmp_path, n_instructions=6)
    original = run(config)
    stage_path(config.run_dir, "judge").unlink()
    recovered = resume(config.run_dir)
    assert stage_path(config.run_dir, "judge").exists()
    assert recovered.train_digest == original.train_digest


def test_verify_artifacts_passes_on_intact_run(tmp_path):
    config = make_run_config(tmp_path, n_instructions=4)
    run(config)
    manifest = load_manifest(config.run_dir)
    assert verify_artifacts(config.run_dir, manifest) == []


# --- locking ---


def test_live_lock_blocks_resume(tmp_path):
    config = make_run_config(tmp_path, n_instructions=4)
    run(config, stop_after="elicit")
    with RunLock(config.run_dir):
        with pytest.raises(LockError, match="locked by live process"):
            resume(config.run_dir)
    resume(config.run_dir)  # released lock no longer blocks


def test_stale_lock_is_reclaimed(tmp_path):
    config = make_run_config(tmp_path, n_instructions=4)
    run(config, stop_after="elicit")
    probe = subprocess.Popen(["/bin/true"])
    probe.wait()
    (config.run_dir / ".lock").write_text(str(probe.pid), encoding="utf-8")
    result = resume(config.run_dir)  # dead owner, lock claimed
    assert all_statuses(result.manifest) == {stage: "done" for stage in STAGES}
    assert not (config.run_dir / ".lock").exists()


# --- presets as ablation arms ---


def test_preset_single_single_pipeline(tmp_path):
    config = apply_preset(make_run_config(tmp_path, n_instructions=6, committee_size=1), PRESET_SINGLE_SINGLE)
    result = run(config)
    manifest = result.manifest
    assert manifest["preset"] == PRESET_SINGLE_SINGLE
    assert manifest["committee"] == ["mock-model-0"]
    assert manifest["samples_per_model"] == 1
    assert manifest["judging_enabled"] is False
    assert manifest["stages"]["judge"]["status"] == "skipped"
    assert manifest["stages"]["judge"]["records"] == 0
    assert read_stage(result.run_dir, "judge") == []
    candidates = read_stage(result.run_dir, "respond")
    assert len(candidates) == 6  # one model, one sample
    pairs = read_stage(result.run_dir, "select")
    assert all(row["mean_score"] is None for row in pairs)
    report = read_json(result.run_dir / "report.json")
    assert report["scores"]["winning_mean"] is None
    assert set(report["committee"]["win_rates"]) == {"0"}


def test_preset_single_multi_pipeline(tmp_path):
    config = apply_preset(
        make_run_config(tmp_path, n_instructions=6, committee_size=1, samples_per_model=1),
        PRESET_SINGLE_MULTI,
    )
    result = run(config)
    manifest = result.manifest
    assert manifest["preset"] == PRESET_SINGLE_MULTI
    assert manifest["committee"] == ["mock-model-0"]
    assert manifest["samples_per_model"] == 2
    assert manifest["judging_enabled"] is True
    assert manifest["stages"]["judge"]["status"] == "done"
    candidates = read_stage(result.run_dir, "respond")
    assert len(candidates) == 6 * 2  # one model, two samples
    ok = sum(1 for c in candidates if c["finish_reason"] != "error")
    assert manifest["stages"]["judge"]["records"] == ok  # single self-judge
    pairs = read_stage(result.run_dir, "select")
    assert all(row["mean_score"] is not None for row in pairs)


def test_preset_committee_multi_pipeline(tmp_path):
    config = apply_preset(make_run_config(tmp_path, n_instructions=6), PRESET_COMMITTEE_MULTI)
    result = run(config)
    manifest = result.manifest
    assert manifest["preset"] == PRESET_COMMITTEE_MULTI
    assert len(manifest["committee"]) == 3
    assert manifest["samples_per_model"] == 3
    assert manifest["stages"]["judge"]["status"] == "done"
    candidates = read_stage(result.run_dir, "respond")
    assert len(candidates) == 6 * 3 * 3
    ok = sum(1 for c in candidates if c["finish_reason"] != "error")
    assert manifest["stages"]["judge"]["records"] == ok * 3
    report = read_json(result.run_dir / "report.json")
    assert set(report["committee"]["win_rates"]) == {"0", "1", "2"}


def test_presets_differ_in_manifest_shape(tmp_path):
    single = apply_preset(make_run_config(tmp_path, n_instructions=4, committee_size=1, run_name="ss"), PRESET_SINGLE_SINGLE)
    multi = apply_preset(
        make_run_config(tmp_path, n_instructions=4, committee_size=1, samples_per_model=1, run_name="sm"),
        PRESET_SINGLE_MULTI,
    )
    committee = apply_preset(make_run_config(tmp_path, n_instructions=4, run_name="cm"), PRESET_COMMITTEE_MULTI)
    manifests = [run(c).manifest for c in (single, multi, committee)]
    shapes = [
        (m["preset"], len(m["committee"]), m["samples_per_model"], m["judging_enabled"], m["stages"]["judge"]["status"])
        for m in manifests
    ]
    assert shapes == [
        (PRESET_SINGLE_SINGLE, 1, 1, False, "skipped"),
        (PRESET_SINGLE_MULTI, 1, 2, True, "done"),
        (PRESET_COMMITTEE_MULTI, 3, 3, True, "done"),
    ]
