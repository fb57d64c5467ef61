"""Acceptance suite.

Each test exercises one acceptance criterion end to end at its stated
tolerance and prints a single PASS/FAIL line (run with `pytest -s` to see
the lines as they happen; they are also captured in failure output).
"""

import math
import random
import time
from collections import Counter
from fractions import Fraction
from pathlib import Path

from sftrecon.assembly import MixPlan, SftRecord, export_records, mix
from sftrecon.config import (
    PRESET_COMMITTEE_MULTI,
    PRESET_SINGLE_MULTI,
    PRESET_SINGLE_SINGLE,
    apply_preset,
)
from sftrecon.instructions import char_ngrams, content_hash, dedup_verbose
from sftrecon.judging import argmax_key, build_rubric_prompt, mean_score, parse_score
from sftrecon.pipeline import STAGES, resume, run
from sftrecon.report import conservation_holds
from sftrecon.runio import read_json, read_jsonl

from conftest import make_run_config
from test_judging import PARSE_CASES

GOLDEN_DIR = Path(__file__).parent / "golden"


def check(number: int, label: str, ok: bool) -> None:
    print(f"{'PASS' if ok else 'FAIL'} criterion {number:02d}: {label}")
    assert ok, f"criterion {number:02d} failed: {label}"


def test_criterion_01_committee_shape_and_runtime(tmp_path):
    config = make_run_config(tmp_path, n_instructions=50)
    started = time.perf_counter()
    result = run(config)
    elapsed = time.perf_counter() - started

    candidates = read_jsonl(result.run_dir / "candidates.jsonl")
    votes = read_jsonl(result.run_dir / "votes.jsonl")
    candidates_per_instruction = Counter(c["instruction_id"] for c in candidates)
    votes_per_instruction = Counter(v["instruction_id"] for v in votes)
    ok = (
        len(candidates_per_instruction) == 50
        and set(candidates_per_instruction.values()) == {9}
        and all(c["finish_reason"] != "error" for c in candidates)
        and set(votes_per_instruction.values()) == {27}
        and len(votes) == 50 * 27
        and elapsed < 60.0
    )
    check(1, f"3x3 committee yields 9 candidates and 27 votes per instruction; N=50 run took {elapsed:.1f}s (< 60s)", ok)


def test_criterion_02_mean_aggregation_oracle():
    rng = random.Random(20_002)
    failures = 0
    for _ in range(10_000):
        n = rng.randint(1, 27)
        if rng.random() < 0.7:
            scores = [float(rng.randint(1, 5)) for _ in range(n)]
        else:
            scores = [rng.uniform(1.0, 5.0) for _ in range(n)]
        got = mean_score(scores)
        want = float(sum(Fraction(s) for s in scores) / n)
        if abs(got - want) > 1e-12 * max(1.0, abs(want)):
            failures += 1
    check(2, f"mean of 10,000 random vote sets matches exact-arithmetic oracle within 1e-12 ({failures} failures)", failures == 0)


def test_criterion_03_argmax_selection_oracle():
    rng = random.Random(30_003)
    all_keys = [(m, s) for m in range(4) for s in range(4)]
    mismatches = 0
    for trial in range(1_000):
        n = rng.randint(1, 16)
        keys = rng.sample(all_keys, n)
        scores = {key: rng.randint(4, 20) / 4 for key in keys}
        if n > 1 and trial % 2 == 0:
            scores[rng.choice(keys)] = max(scores.values())  # forced tie at the top
        best_value = max(scores.values())
        want = min(key for key, value in scores.items() if value == best_value)
        if argmax_key(scores) != want:
            mismatches += 1
    check(3, f"argmax with smallest-key tie-break matches oracle on 1,000 score grids ({mismatches} mismatches)", mismatches == 0)


def test_criterion_04_argmax_monotone_invariance():
    rng = random.Random(40_004)
    all_keys = [(m, s) for m in range(3) for s in range(3)]
    moved = 0
    for _ in range(200):
        n = rng.randint(2, 9)
        keys = rng.sample(all_keys, n)
        # dyadic scores plus dyadic a > 0 and b keep a*s + b exact in floats
        scores = {key: rng.randint(8, 40) / 8 for key in keys}
        a = rng.randint(1, 32) / 4
        b = rng.randint(-100, 100) / 4
        transformed = {key: a * value + b for key, value in scores.items()}
        if argmax_key(transformed) != argmax_key(scores):
            moved += 1
    check(4, f"winner invariant under 200 monotone score transforms ({moved} moved)", moved == 0)


def test_criterion_05_score_parsing_suite():
    mismatches = 0
    for text, expected, clamped in PARSE_CASES:
        parsed = parse_score(text)
        if expected is None:
            ok = parsed is None
        else:
            ok = parsed is not None and parsed.value == expected and parsed.clamped is clamped
        if not ok:
            mismatches += 1
    check(
        5,
        f"score parser handles {len(PARSE_CASES)} labeled replies (>= 25 required, {mismatches} mismatches)",
        len(PARSE_CASES) >= 25 and mismatches == 0,
    )


def test_criterion_06_rubric_prompt_golden_file():
    golden = (GOLDEN_DIR / "rubric_prompt.txt").read_text(encoding="utf-8")
    prompt = build_rubric_prompt(
        "Describe the water cycle.",
        "Evaporation, condensation, precipitation.",
    )
    check(6, "judge prompt is byte-identical to the frozen golden file", prompt + "\n" == golden)


def test_criterion_07_mix_ratio_and_reproducibility(tmp_path):
    recon = [
        SftRecord(instruction=f"Recon question {i}?", output=f"Recon answer {i}.", origin="recon", id=f"r{i}")
        for i in range(830)
    ]
    domain = [
        SftRecord(instruction=f"Domain question {i}?", output=f"Domain answer {i}.", origin="domain", id=f"d{i}")
        for i in range(400)
    ]
    plan = MixPlan(domain_fraction=0.17)
    digests = []
    counts = []
    for name in ("first.jsonl", "second.jsonl"):
        mixed = mix(recon, domain, plan, seed=777)
        counts.append((len(mixed), sum(1 for r in mixed if r.origin == "domain")))
        digests.append(export_records(mixed, tmp_path / name, "pair").sha256)
    ok = counts == [(1000, 170), (1000, 170)] and digests[0] == digests[1]
    check(7, f"1000-record mix at 17% holds exactly 170 domain records and reproduces digest {digests[0][:12]}...", ok)


def _synthetic_corpus(rng: random.Random, size: int) -> list[str]:
    words = (
        "alpha bravo charlie delta echo foxtrot golf hotel india juliet kilo lima "
        "mike november oscar papa quebec romeo sierra tango uniform victor whiskey "
        "window garden river mountain copper lantern thread isotope harbor velvet "
        "meadow quartz saffron timber umbrella voyage walnut zephyr orchard pattern"
    ).split()
    texts: list[str] = []
    for _ in range(size):
        roll = rng.random()
        long_enough = [t for t in texts if len(t) > 100]
        if roll < 0.15 and texts:
            # exact duplicate modulo case and whitespace (same content hash)
            base = rng.choice(texts)
            dup = base.upper() if rng.random() < 0.5 else base.casefold()
            texts.append("  " + dup.replace(" ", "   ", 2))
        elif roll < 0.30 and long_enough:
            # near duplicate: one-letter edit in a long base text
            base = rng.choice(long_enough)
            pos = rng.randrange(20, len(base) - 20)
            texts.append(base[:pos] + rng.choice("qzxj") + base[pos + 1 :])
        else:
            count = rng.randint(14, 34)
            texts.append(" ".join(rng.choice(words) for _ in range(count)) + "?")
    return texts


def _oracle_jaccard(a: frozenset, b: frozenset) -> float:
    # Independent formulation: |A&B| / (|A| + |B| - |A&B|).
    inter = len(a & b)
    union = len(a) + len(b) - inter
    return inter / union if union else 1.0


def _oracle_dedup(texts: list[str]) -> list[int]:
    kept: list[int] = []
    hashes: set[str] = set()
    grams = [char_ngrams(t) for t in texts]
    for index, text in enumerate(texts):
        digest = content_hash(text)
        if digest in hashes:
            continue
        g = grams[index]
        duplicate = False
        for k in kept:
            other = grams[k]
            small, large = sorted((len(g), len(other)))
            # Jaccard <= small/large, so such pairs can never clear 0.9.
            if large and small / large <= 0.9:
                continue
            if _oracle_jaccard(g, other) > 0.9:
                duplicate = True
                break
        if duplicate:
            continue
        hashes.add(digest)
        kept.append(index)
    return kept


def test_criterion_08_dedup_soundness_against_quadratic_oracle():
    rng = random.Random(80_008)
    corpus = _synthetic_corpus(rng, 2000)
    kept, drops = dedup_verbose(corpus)

    hashes = [content_hash(corpus[i]) for i in kept]
    no_hash_repeats = len(hashes) == len(set(hashes))

    # Every kept pair that could possibly exceed 0.9 is verified exactly;
    # the size bound above makes skipping the rest sound.
    gram_sets = sorted((char_ngrams(corpus[i]) for i in kept), key=len)
    near_pairs = 0
    for i in range(len(gram_sets)):
        for j in range(i + 1, len(gram_sets)):
            if len(gram_sets[i]) / len(gram_sets[j]) <= 0.9:
                break  # sizes are sorted, the ratio only shrinks from here
            if _oracle_jaccard(gram_sets[i], gram_sets[j]) > 0.9:
                near_pairs += 1

    oracle_kept = _oracle_dedup(corpus)
    ok = no_hash_repeats and near_pairs == 0 and kept == oracle_kept and len(kept) + len(drops) == 2000
    check(
        8,
        f"dedup of 2000 texts kept {len(kept)} with no repeated hashes, no Jaccard>0.9 pairs, equal to O(n^2) oracle",
        ok,
    )


def test_criterion_09_interrupted_run_resumes_to_identical_digests(tmp_path):
    straight = run(make_run_config(tmp_path, n_instructions=8, run_name="straight"))
    config = make_run_config(tmp_path, n_instructions=8, run_name="killed")
    run(config, stop_after="judge")  # the process "dies" after judging
    resumed = resume(config.run_dir)
    ok = resumed.train_digest == straight.train_digest and all(
        resumed.manifest["stages"][stage]["digest"] == straight.manifest["stages"][stage]["digest"]
        for stage in STAGES
    )
    check(9, "run killed after judging resumes to byte-identical artifacts and final digest", ok)


def test_criterion_10_ablation_presets_produce_distinct_manifests(tmp_path):
    single = apply_preset(
        make_run_config(tmp_path, n_instructions=4, committee_size=1, run_name="ss"), PRESET_SINGLE_SINGLE
    )
    multi = apply_preset(
        make_run_config(tmp_path, n_instructions=4, committee_size=1, samples_per_model=1, run_name="sm"),
        PRESET_SINGLE_MULTI,
    )
    committee = apply_preset(make_run_config(tmp_path, n_instructions=4, run_name="cm"), PRESET_COMMITTEE_MULTI)
    manifests = [run(c).manifest for c in (single, multi, committee)]
    shapes = [
        (
            m["preset"],
            len(m["committee"]),
            m["samples_per_model"],
            m["judging_enabled"],
            m["stages"]["judge"]["status"],
        )
        for m in manifests
    ]
    ok = shapes == [
        (PRESET_SINGLE_SINGLE, 1, 1, False, "skipped"),
        (PRESET_SINGLE_MULTI, 1, 2, True, "done"),
        (PRESET_COMMITTEE_MULTI, 3, 3, True, "done"),
    ] and all(m["stages"]["mix"]["status"] == "done" for m in manifests)
    check(10, "single-single, single-multi-filtered, committee-multi-filtered all complete with distinct manifests", ok)


def test_criterion_11_report_conservation_and_win_rates(tmp_path):
    # The mock draws from a finite instruction space, so a 200-strong corpus
    # needs a deeper draw budget to clear duplicate collisions.
    config = make_run_config(tmp_path, n_instructions=200, domain_count=80, oversample=3.0)
    result = run(config)
    report = read_json(result.run_dir / "report.json")
    win_rates = report["committee"]["win_rates"]
    rate_sum = sum(win_rates.values())
    ok = (
        conservation_holds(report)
        and report["counts"]["instructions"] == 200
        and report["counts"]["pairs"] + report["counts"]["dropped"] == 200
        and math.isclose(rate_sum, 1.0, abs_tol=1e-9)
        and set(win_rates) == {"0", "1", "2"}
    )
    check(11, f"N=200 report conserves records and win rates sum to {rate_sum:.12f} (1 +/- 1e-9)", ok)
