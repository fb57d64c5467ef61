import json
from pathlib import Path

import pytest

from sftrecon.assembly import MixPlan
from sftrecon.config import RunConfig
from sftrecon.mock import mock_spec


def make_domain_file(path: Path, count: int = 60) -> Path:
    """A synthetic pair-format domain dataset."""
    with open(path, "w", encoding="utf-8") as handle:
        for index in range(count):
            handle.write(
                json.dumps(
                    {
                        "instruction": f"Domain question number {index}: what changed in release {index}?",
                        "output": f"Release {index} mostly changed internal plumbing; see the changelog entry {index}.",
                    }
                )
                + "\n"
            )
    return path


def make_run_config(
    tmp_path: Path,
    n_instructions: int = 20,
    samples_per_model: int = 3,
    committee_size: int = 3,
    seed: int = 1234,
    run_name: str = "run",
    domain_count: int = 60,
    **kwargs,
) -> RunConfig:
    """A mock-backed three-model run config rooted in tmp_path."""
    assert committee_size >= 1
    domain = make_domain_file(tmp_path / f"domain-{run_name}.jsonl", domain_count)
    specs = [mock_spec(f"mock-model-{i}", seed=11 * (i + 1)) for i in range(committee_size)]
    return RunConfig(
        base_model=specs[0],
        committee=specs[1:],
        seed=seed,
        run_dir=tmp_path / run_name,
        n_instructions=n_instructions,
        samples_per_model=samples_per_model,
        mix_plan=MixPlan(domain_fraction=0.17, mode="ratio"),
        domain_path=domain,
        **kwargs,
    )


@pytest.fixture
def run_config(tmp_path):
    return make_run_config(tmp_path)
