"""Staged pipeline with a resumable on-disk manifest.

A run executes elicit, respond, judge, select, mix, and report in order
inside one run directory. Every stage persists its full output as JSONL
plus a sha256 digest in manifest.json before the next stage starts, so a
killed run resumes from the last completed stage and produces byte-for-byte
the same final artifacts as an uninterrupted run. Artifacts that no longer
match their recorded digest invalidate their stage and every later stage.
"""

from __future__ import annotations

import logging
from contextlib import ExitStack
from dataclasses import dataclass
from pathlib import Path

from .assembly import assemble_recon, export_records, load_domain, mix
from .backends import Backend, make_backend
from .chat_templates import get_template, template_registry
from .config import RunConfig, parse_config
from .errors import ConfigError, SftReconError
from .instructions import Instruction, elicit
from .judging import CuratedPair, JudgeVote, judge_corpus, select_pairs, SelectionResult
from .report import build_report, conservation_holds, CategoryHistogram, render_report_text
from .responses import Candidate, respond_corpus
from .runio import (
    ArtifactError,
    read_json,
    read_jsonl,
    RunLock,
    sha256_file,
    write_json,
    write_jsonl,
    write_text,
)

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1

STAGE_ELICIT = "elicit"
STAGE_RESPOND = "respond"
STAGE_JUDGE = "judge"
STAGE_SELECT = "select"
STAGE_MIX = "mix"
STAGE_REPORT = "report"
STAGES = (STAGE_ELICIT, STAGE_RESPOND, STAGE_JUDGE, STAGE_SELECT, STAGE_MIX, STAGE_REPORT)

STAGE_FILES = {
    STAGE_ELICIT: ("instructions.jsonl",),
    STAGE_RESPOND: ("candidates.jsonl",),
    STAGE_JUDGE: ("votes.jsonl",),
    STAGE_SELECT: ("curated_pairs.jsonl",),
    STAGE_MIX: ("train.jsonl",),
    STAGE_REPORT: ("report.json", "report.txt", "category_histogram.csv"),
}

STATUS_PENDING = "pending"
STATUS_DONE = "done"
STATUS_SKIPPED = "skipped"

CONFIG_FILE = "config.json"
MANIFEST_FILE = "manifest.json"


class PipelineError(SftReconError):
    pass


@dataclass
class PipelineResult:
    run_dir: Path
    manifest: dict

    def stage_digest(self, stage: str) -> str | None:
        return self.manifest["stages"][stage].get("digest")

    @property
    def train_digest(self) -> str | None:
        return self.stage_digest(STAGE_MIX)


def stage_path(run_dir: Path, stage: str, which: int = 0) -> Path:
    return Path(run_dir) / STAGE_FILES[stage][which]


def new_manifest(config: RunConfig) -> dict:
    return {
        "manifest_version": MANIFEST_VERSION,
        "config_digest": config.digest(),
        "preset": config.preset,
        "seed": config.seed,
        "committee": [spec.model_id for spec in config.full_committee],
        "samples_per_model": config.samples_per_model,
        "judging_enabled": config.judging_enabled,
        "stages": {
            stage: {"status": STATUS_PENDING, "records": None, "digest": None, "files": {}, "stats": {}}
            for stage in STAGES
        },
    }


def load_manifest(run_dir: Path) -> dict:
    manifest = read_json(Path(run_dir) / MANIFEST_FILE)
    if manifest.get("manifest_version") != MANIFEST_VERSION:
        raise PipelineError(f"unsupported manifest version in {run_dir}")
    return manifest


def save_manifest(run_dir: Path, manifest: dict) -> None:
    write_json(Path(run_dir) / MANIFEST_FILE, manifest)


def verify_artifacts(run_dir: Path, manifest: dict) -> list[str]:
    """Check completed stages' files against their digests.

    A missing or altered artifact marks its stage pending again, along with
    every stage after it. Returns the invalidated stage names.
    """
    run_dir = Path(run_dir)
    invalidated: list[str] = []
    broken = False
    for stage in STAGES:
        entry = manifest["stages"][stage]
        if not broken and entry["status"] in (STATUS_DONE, STATUS_SKIPPED):
            for name, digest in entry.get("files", {}).items():
                path = run_dir / name
                if not path.exists() or sha256_file(path) != digest:
                    log.warning("artifact %s failed verification; re-running %s", path, stage)
                    broken = True
                    break
        if broken:
            if entry["status"] != STATUS_PENDING:
                invalidated.append(stage)
            manifest["stages"][stage] = {
                "status": STATUS_PENDING,
                "records": None,
                "digest": None,
                "files": {},
                "stats": {},
            }
    return invalidated


class _RunState:
    """Lazy stage inputs: in-memory when just produced, else read from disk."""

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        self.instructions: list[Instruction] | None = None
        self.candidates: list[Candidate] | None = None
        self.votes: list[JudgeVote] | None = None
        self.pairs: list[CuratedPair] | None = None
        self.selection: SelectionResult | None = None
        self.mix_stats: dict | None = None

    def need_instructions(self) -> list[Instruction]:
        if self.instructions is None:
            rows = read_jsonl(stage_path(self.run_dir, STAGE_ELICIT))
            self.instructions = [Instruction.from_dict(row) for row in rows]
        return self.instructions

    def need_candidates(self) -> list[Candidate]:
        if self.candidates is None:
            rows = read_jsonl(stage_path(self.run_dir, STAGE_RESPOND))
            self.candidates = [Candidate.from_dict(row) for row in rows]
        return self.candidates

    def need_votes(self) -> list[JudgeVote]:
        if self.votes is None:
            path = stage_path(self.run_dir, STAGE_JUDGE)
            rows = read_jsonl(path) if path.exists() else []
            self.votes = [JudgeVote.from_dict(row) for row in rows]
        return self.votes

    def need_pairs(self) -> list[CuratedPair]:
        if self.pairs is None:
            rows = read_jsonl(stage_path(self.run_dir, STAGE_SELECT))
            self.pairs = [CuratedPair.from_dict(row) for row in rows]
        return self.pairs


def _record_stage(
    run_dir: Path,
    manifest: dict,
    stage: str,
    records: int,
    digest: str,
    files: dict[str, str],
    stats: dict | None = None,
    status: str = STATUS_DONE,
) -> None:
    manifest["stages"][stage] = {
        "status": status,
        "records": records,
        "digest": digest,
        "files": files,
        "stats": stats or {},
    }
    save_manifest(run_dir, manifest)


class _StageRunner:
    def __init__(self, run_dir: Path, config: RunConfig, manifest: dict, stack: ExitStack):
        self.run_dir = Path(run_dir)
        self.config = config
        self.manifest = manifest
        self.state = _RunState(run_dir)
        self._stack = stack
        self._backends: dict[str, Backend] = {}
        self._registry = template_registry(config.templates_path)

    def backend_for(self, model_id: str) -> Backend:
        if model_id not in self._backends:
            spec = next(s for s in self.config.full_committee if s.model_id == model_id)
            self._backends[model_id] = self._stack.enter_context(make_backend(spec))
        return self._backends[model_id]

    @property
    def committee(self) -> list[Backend]:
        return [self.backend_for(spec.model_id) for spec in self.config.full_committee]

    def run_stage(self, stage: str) -> None:
        getattr(self, f"_stage_{stage}")()

    def _stage_elicit(self) -> None:
        config = self.config
        template = get_template(config.base_model.template_family, self._registry)
        result = elicit(
            self.backend_for(config.base_model.model_id),
            template,
            config.n_instructions,
            config.seed,
            oversample=config.oversample,
            params=config.elicit_sampling,
        )
        path = stage_path(self.run_dir, STAGE_ELICIT)
        digest = write_jsonl(path, (i.to_dict() for i in result.instructions))
        self.state.instructions = result.instructions
        _record_stage(
            self.run_dir,
            self.manifest,
            STAGE_ELICIT,
            len(result.instructions),
            digest,
            {path.name: digest},
            stats=result.stats.to_dict(),
        )

    def _stage_respond(self) -> None:
        candidates = respond_corpus(
            self.committee,
            self.state.need_instructions(),
            self.config.samples_per_model,
            self.config.seed,
            params=self.config.response_sampling,
            registry=self._registry,
        )
        path = stage_path(self.run_dir, STAGE_RESPOND)
        digest = write_jsonl(path, (c.to_dict() for c in candidates))
        self.state.candidates = candidates
        _record_stage(
            self.run_dir,
            self.manifest,
            STAGE_RESPOND,
            len(candidates),
            digest,
            {path.name: digest},
            stats={"failed": sum(1 for c in candidates if not c.ok)},
        )

    def _stage_judge(self) -> None:
        path = stage_path(self.run_dir, STAGE_JUDGE)
        if not self.config.judging_enabled:
            digest = write_jsonl(path, [])
            self.state.votes = []
            _record_stage(
                self.run_dir,
                self.manifest,
                STAGE_JUDGE,
                0,
                digest,
                {path.name: digest},
                stats={"bypassed": True},
                status=STATUS_SKIPPED,
            )
            return
        votes = judge_corpus(
            self.committee,
            self.state.need_instructions(),
            self.state.need_candidates(),
            self.config.seed,
            params=self.config.judge_sampling,
        )
        digest = write_jsonl(path, (v.to_dict() for v in votes))
        self.state.votes = votes
        _record_stage(
            self.run_dir,
            self.manifest,
            STAGE_JUDGE,
            len(votes),
            digest,
            {path.name: digest},
            stats={
                "unparsable": sum(1 for v in votes if v.parse_status == "unparsable"),
                "retry_ok": sum(1 for v in votes if v.parse_status == "retry-ok"),
            },
        )

    def _stage_select(self) -> None:
        selection = select_pairs(
            self.state.need_instructions(),
            self.state.need_candidates(),
            self.state.need_votes(),
            judging_enabled=self.config.judging_enabled,
        )
        path = stage_path(self.run_dir, STAGE_SELECT)
        digest = write_jsonl(path, (p.to_dict() for p in selection.pairs))
        self.state.pairs = selection.pairs
        self.state.selection = selection
        _record_stage(
            self.run_dir,
            self.manifest,
            STAGE_SELECT,
            len(selection.pairs),
            digest,
            {path.name: digest},
            stats={
                "dropped": [[instruction_id, reason] for instruction_id, reason in selection.dropped],
                "tie_count": selection.tie_count,
            },
        )

    def _stage_mix(self) -> None:
        config = self.config
        recon = assemble_recon(self.state.need_pairs())
        domain = load_domain(config.domain_path, config.domain_format) if config.domain_path else []
        mixed = mix(recon, domain, config.mix_plan, config.seed)
        path = stage_path(self.run_dir, STAGE_MIX)
        result = export_records(mixed, path, config.export_format)
        domain_count = sum(1 for record in mixed if record.origin == "domain")
        self.state.mix_stats = {
            "total": result.count,
            "domain": domain_count,
            "recon": result.count - domain_count,
        }
        _record_stage(
            self.run_dir,
            self.manifest,
            STAGE_MIX,
            result.count,
            result.sha256,
            {path.name: result.sha256},
            stats=self.state.mix_stats,
        )

    def _stage_report(self) -> None:
        config = self.config
        selection = self.state.selection
        if selection is None:
            stats = self.manifest["stages"][STAGE_SELECT]["stats"]
            selection = SelectionResult(
                pairs=self.state.need_pairs(),
                dropped=[(entry[0], entry[1]) for entry in stats.get("dropped", [])],
                tie_count=stats.get("tie_count", 0),
            )
        mix_stats = self.state.mix_stats or self.manifest["stages"][STAGE_MIX]["stats"]
        classify_backend = (
            self.backend_for(config.base_model.model_id)
            if config.classify_method == "model"
            else None
        )
        report = build_report(
            instruction_count=len(self.state.need_instructions()),
            candidates=self.state.need_candidates(),
            votes=self.state.need_votes(),
            selection=selection,
            committee_ids=[spec.model_id for spec in config.full_committee],
            classify_method=config.classify_method,
            classify_backend=classify_backend,
            mixed_total=mix_stats.get("total"),
            mixed_domain=mix_stats.get("domain"),
        )
        if not conservation_holds(report):
            raise PipelineError(
                "record conservation violated: instructions != pairs + dropped"
            )
        json_path = stage_path(self.run_dir, STAGE_REPORT, 0)
        text_path = stage_path(self.run_dir, STAGE_REPORT, 1)
        csv_path = stage_path(self.run_dir, STAGE_REPORT, 2)
        digest = write_json(json_path, report)
        text_digest = write_text(text_path, render_report_text(report))
        histogram = CategoryHistogram(
            counts=report["category_histogram"]["counts"],
            total=report["category_histogram"]["total"],
        )
        csv_digest = write_text(csv_path, histogram.to_csv())
        _record_stage(
            self.run_dir,
            self.manifest,
            STAGE_REPORT,
            report["counts"]["pairs"],
            digest,
            {json_path.name: digest, text_path.name: text_digest, csv_path.name: csv_digest},
            stats={"categories": report["category_histogram"]["counts"]},
        )


def _check_stop_after(stop_after: str | None) -> None:
    if stop_after is not None and stop_after not in STAGES:
        raise ConfigError(f"stop_after must be one of {STAGES}, got {stop_after!r}")


def _execute(run_dir: Path, config: RunConfig, manifest: dict, stop_after: str | None) -> PipelineResult:
    last = STAGES.index(stop_after) if stop_after else len(STAGES) - 1
    with ExitStack() as stack:
        runner = _StageRunner(run_dir, config, manifest, stack)
        for stage in STAGES[: last + 1]:
            if manifest["stages"][stage]["status"] in (STATUS_DONE, STATUS_SKIPPED):
                continue
            log.info("running stage %s", stage)
            runner.run_stage(stage)
    return PipelineResult(run_dir=Path(run_dir), manifest=manifest)


def run(config: RunConfig, stop_after: str | None = None) -> PipelineResult:
    """Start a fresh run in config.run_dir."""
    _check_stop_after(stop_after)
    config.validate()
    if config.run_dir is None:
        raise ConfigError("run_dir is required to run the pipeline")
    run_dir = Path(config.run_dir)
    if (run_dir / MANIFEST_FILE).exists():
        raise PipelineError(
            f"{run_dir} already holds a run (manifest present); resume it instead"
        )
    run_dir.mkdir(parents=True, exist_ok=True)
    write_json(run_dir / CONFIG_FILE, config.to_dict())
    manifest = new_manifest(config)
    save_manifest(run_dir, manifest)
    with RunLock(run_dir):
        return _execute(run_dir, config, manifest, stop_after)


def resume(run_dir: Path, stop_after: str | None = None) -> PipelineResult:
    """Continue a run, re-verifying completed artifacts first."""
    _check_stop_after(stop_after)
    run_dir = Path(run_dir)
    if not (run_dir / MANIFEST_FILE).exists():
        raise PipelineError(f"{run_dir} has no manifest; nothing to resume")
    try:
        config = parse_config(read_json(run_dir / CONFIG_FILE))
    except ArtifactError as exc:
        raise PipelineError(f"cannot load run config: {exc}") from exc
    manifest = load_manifest(run_dir)
    if manifest["config_digest"] != config.digest():
        raise PipelineError(
            f"{run_dir}/{CONFIG_FILE} no longer matches the manifest; "
            "start a fresh run for a changed config"
        )
    config.run_dir = run_dir
    with RunLock(run_dir):
        invalidated = verify_artifacts(run_dir, manifest)
        if invalidated:
            save_manifest(run_dir, manifest)
        return _execute(run_dir, config, manifest, stop_after)
