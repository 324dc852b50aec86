import os

import pytest

from src.attack import (MANIFEST_FILE, AttackKind, AttackPlan, PromptSource, build_autocomplete_prompt_sequence,
                        build_naive_prompt_sequence, load_checkpoint, load_records, resume_run,
                        run_autocomplete_attack, run_naive_attack, sample_naive_prompts, successful)
from src.backend import (BackendRole, GenerationConfig, estimate_token_budget, http_backend, memorized_text,
                         mock_memorizing_backend)
from src.corpus import AUTOCOMPLETE_TEMPLATE, CLASSIFICATION_SEPARATOR
from src.errors import AttackError, ConfigError

REFERENCE = ("It was the best of times, it was the worst of times, it was the age of wisdom, it was the age of "
             "foolishness, it was the epoch of belief, it was the epoch of incredulity, it was the season of "
             "Light, it was the season of Darkness, it was the spring of hope, it was the winter of despair.")


def _naive_plan(n_queries=40, **options):
    return AttackPlan(kind=AttackKind.NAIVE_EXTRACTION, n_queries=n_queries, snippet_length_chars=50, **options)


def _mocks(records):
    return (mock_memorizing_backend(records, 1.0, 0, BackendRole.FINE_TUNED),
            mock_memorizing_backend(records, 0.0, 0, BackendRole.BASE))


def _read(path):
    with open(path, 'rb') as handle:
        return handle.read()


# ---------------------------------------------------------------------------
# Plan arithmetic and prompt construction
# ---------------------------------------------------------------------------

def test_autocomplete_query_counts():
    plan = AttackPlan(kind=AttackKind.AUTOCOMPLETE, queries_per_subject=5)
    for n_subjects, expected in ((149, 745), (255, 1275)):
        prompts = build_autocomplete_prompt_sequence(plan, [f"Subject {i}" for i in range(n_subjects)])
        assert len(prompts) == expected


def test_naive_plan_allocation_and_budget():
    plan = AttackPlan(kind=AttackKind.NAIVE_EXTRACTION, n_queries=1800)
    prompts = build_naive_prompt_sequence(plan, PromptSource.snippets(REFERENCE))
    kinds = [prompt.kind for prompt in prompts]
    assert kinds.count('blank') == 900 and kinds.count('snippet') == 900
    assert [prompt.request_index for prompt in prompts] == list(range(1800))
    budget = estimate_token_budget(plan.n_queries, plan.config)
    assert (budget.max_tokens_total, budget.approx_words) == (460_800, 345_600)


def test_blank_count_rounds_half_up_and_alternates():
    plan = _naive_plan(n_queries=5, blank_fraction=0.5)
    assert plan.blank_count() == 3
    kinds = [p.kind for p in build_naive_prompt_sequence(plan, PromptSource.snippets(REFERENCE))]
    assert kinds == ['blank', 'snippet', 'blank', 'snippet', 'blank']

    plan = _naive_plan(n_queries=5, blank_fraction=0.8)
    kinds = [p.kind for p in build_naive_prompt_sequence(plan, PromptSource.snippets(REFERENCE))]
    assert kinds == ['blank', 'snippet', 'blank', 'blank', 'blank']

    plan = _naive_plan(n_queries=5, blank_fraction=0.2)
    kinds = [p.kind for p in build_naive_prompt_sequence(plan, PromptSource.snippets(REFERENCE))]
    assert kinds == ['blank', 'snippet', 'snippet', 'snippet', 'snippet']


def test_blank_source_and_invalid_source():
    prompts = build_naive_prompt_sequence(_naive_plan(n_queries=6), PromptSource.blank())
    assert all(p.prompt == '' and p.kind == 'blank' for p in prompts)
    with pytest.raises(AttackError) as info:
        build_naive_prompt_sequence(_naive_plan(), PromptSource.subject_list(['a']))
    assert info.value.kind == 'InvalidPromptSource'


def test_snippets_are_exact_slices_and_deterministic():
    snippets = sample_naive_prompts(REFERENCE, 200, 50, seed=9)
    assert all(len(snippet) == 50 and snippet in REFERENCE for snippet in snippets)
    assert snippets == sample_naive_prompts(REFERENCE, 200, 50, seed=9)
    assert snippets != sample_naive_prompts(REFERENCE, 200, 50, seed=10)


def test_snippets_never_contain_the_separator():
    text = ("plain words here " * 4 + CLASSIFICATION_SEPARATOR) * 10
    snippets = sample_naive_prompts(text, 1000, 30, seed=1)
    assert all(CLASSIFICATION_SEPARATOR not in snippet for snippet in snippets)
    assert all(len(snippet) == 30 for snippet in snippets)


def test_snippet_errors():
    with pytest.raises(AttackError) as info:
        sample_naive_prompts("short", 1, 50, seed=0)
    assert info.value.kind == 'ReferenceTooShort'
    with pytest.raises(AttackError) as info:
        sample_naive_prompts(("ab" + CLASSIFICATION_SEPARATOR) * 20, 3, 20, seed=0)
    assert info.value.kind == 'NoCleanSnippet'


def test_autocomplete_prompt_indices():
    plan = AttackPlan(kind=AttackKind.AUTOCOMPLETE, queries_per_subject=3)
    prompts = build_autocomplete_prompt_sequence(plan, ['First', 'Second'])
    assert [(p.request_index, p.subject_index) for p in prompts] == [(0, 0), (1, 0), (2, 0), (3, 1), (4, 1),
                                                                     (5, 1)]
    assert prompts[3].prompt == AUTOCOMPLETE_TEMPLATE + 'Second'
    with pytest.raises(AttackError) as info:
        build_autocomplete_prompt_sequence(plan, [])
    assert info.value.kind == 'NoSubjects'


def test_plan_validation():
    for bad in (dict(n_queries=0), dict(blank_fraction=1.5), dict(snippet_length_chars=0),
                dict(queries_per_subject=0), dict(seed=-1), dict(failure_threshold=2.0)):
        with pytest.raises(AttackError) as info:
            AttackPlan(kind=AttackKind.NAIVE_EXTRACTION, **bad)
        assert info.value.kind == 'InvalidPlan'


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

def test_naive_attack_sends_identical_prompts_to_both_roles(synthetic):
    ft, base = _mocks(synthetic.records)
    result = run_naive_attack(ft, base, _naive_plan(), PromptSource.snippets(REFERENCE))
    assert len(result.gen_ft) == len(result.gen_base) == 40
    assert [r.prompt for r in result.gen_ft] == [r.prompt for r in result.gen_base]
    assert all(r.backend_role is BackendRole.FINE_TUNED for r in result.gen_ft)
    assert all(r.timestamp is None for r in result.gen_ft + result.gen_base)
    assert all(CLASSIFICATION_SEPARATOR not in r.prompt for r in result.gen_ft)
    assert result.gen_ft[3].completion == memorized_text(synthetic.records[3])


def test_attack_prompts_with_separator_are_rejected(synthetic):
    plan = AttackPlan(kind=AttackKind.AUTOCOMPLETE, queries_per_subject=1)
    backend = mock_memorizing_backend(synthetic.records, 1.0, 0)
    with pytest.raises(AttackError) as info:
        run_autocomplete_attack(backend, ["Hello" + CLASSIFICATION_SEPARATOR + "there"], plan)
    assert info.value.kind == 'SeparatorInPrompt'


def test_interrupted_run_resumes_to_identical_artifacts(tmp_path, synthetic):
    ft, base = _mocks(synthetic.records[:10])
    plan = _naive_plan(n_queries=60)
    source = PromptSource.snippets(REFERENCE)
    full, partial = str(tmp_path / 'full'), str(tmp_path / 'partial')

    run_naive_attack(ft, base, plan, source, run_dir=full, checkpoint_every=7)
    first = run_naive_attack(ft, base, plan, source, run_dir=partial, request_limit=25, checkpoint_every=7)
    assert len(first.gen_ft) == len(first.gen_base) == 25

    checkpoint = load_checkpoint(partial)
    assert set(checkpoint.completed('fine_tuned')) == set(range(25))
    resumed = resume_run(checkpoint, plan, [ft, base], source, checkpoint_every=7)
    assert len(resumed.gen_ft) == 60

    for name in (MANIFEST_FILE, 'records_fine_tuned.jsonl', 'records_base.jsonl'):
        assert _read(os.path.join(full, name)) == _read(os.path.join(partial, name))


def test_resume_with_a_different_plan_is_refused(tmp_path, synthetic):
    ft, base = _mocks(synthetic.records[:5])
    source = PromptSource.snippets(REFERENCE)
    run_naive_attack(ft, base, _naive_plan(n_queries=10), source, run_dir=str(tmp_path), request_limit=3)
    with pytest.raises(AttackError) as info:
        run_naive_attack(ft, base, _naive_plan(n_queries=10, seed=1), source, run_dir=str(tmp_path))
    assert info.value.kind == 'PlanMismatch'

    with pytest.raises(AttackError) as info:
        load_checkpoint(str(tmp_path / 'missing'))
    assert info.value.kind == 'NoCheckpoint'


def _http_autocomplete(server, run_dir=None, retry_failed=False):
    plan = AttackPlan(kind=AttackKind.AUTOCOMPLETE, queries_per_subject=5, config=GenerationConfig(max_tokens=16))
    backend = http_backend(server.endpoint, 'ft-model', retry_budget=0, max_in_flight=2)
    return run_autocomplete_attack(backend, ['One', 'Two', 'Three', 'Four'], plan, run_dir=run_dir, api_key='key',
                                   retry_failed=retry_failed, sleep=lambda seconds: None)


def test_failed_requests_are_flagged_and_retryable(tmp_path, stub_server):
    stub_server.respond((500, {'error': 'boom'}, {}))
    records = _http_autocomplete(stub_server, run_dir=str(tmp_path))
    assert len(records) == 20
    failed = [record for record in records if record.failed]
    assert len(failed) == 1 and failed[0].error == 'ServerError'
    assert len(successful(records)) == 19
    assert all(record.timestamp for record in records)

    retried = _http_autocomplete(stub_server, run_dir=str(tmp_path), retry_failed=True)
    assert not any(record.failed for record in retried)
    assert len(stub_server.requests) == 21


def test_too_many_failures_fail_the_run(tmp_path, stub_server):
    stub_server.respond(*[(500, {'error': 'boom'}, {})] * 5)
    with pytest.raises(AttackError) as info:
        _http_autocomplete(stub_server, run_dir=str(tmp_path))
    assert info.value.kind == 'RunFailed'
    assert os.path.exists(tmp_path / 'records_fine_tuned.jsonl')


def test_auth_failure_aborts_the_run(stub_server):
    stub_server.respond(*[(401, {'error': 'denied'}, {})] * 20)
    with pytest.raises(ConfigError) as info:
        _http_autocomplete(stub_server)
    assert info.value.kind == 'AuthFailed'


def test_zero_request_limit_still_writes_empty_records(tmp_path, synthetic):
    ft, base = _mocks(synthetic.records[:5])
    result = run_naive_attack(ft, base, _naive_plan(n_queries=10), PromptSource.snippets(REFERENCE),
                              run_dir=str(tmp_path), request_limit=0)
    assert result.gen_ft == [] and result.gen_base == []
    for role in ('fine_tuned', 'base'):
        assert _read(tmp_path / f"records_{role}.jsonl") == b''
    assert load_checkpoint(str(tmp_path)).completed('fine_tuned') == {}


def test_corrupt_records_file_is_reported(tmp_path, synthetic):
    ft, base = _mocks(synthetic.records[:5])
    run_naive_attack(ft, base, _naive_plan(n_queries=4), PromptSource.snippets(REFERENCE), run_dir=str(tmp_path))
    path = tmp_path / 'records_fine_tuned.jsonl'
    with open(path, 'ab') as handle:
        handle.write(b'{"request_index": 4, "prompt": \n')
    with pytest.raises(AttackError) as info:
        load_records(str(path))
    assert info.value.kind == 'CorruptCheckpoint'

    path.write_bytes(b'\xff\xfe\n')
    with pytest.raises(AttackError) as info:
        load_records(str(path))
    assert info.value.kind == 'Encoding'


def test_each_role_sends_its_own_api_key(stub_server):
    ft = http_backend(stub_server.endpoint, 'ft-model', BackendRole.FINE_TUNED, retry_budget=0)
    base = http_backend(stub_server.endpoint, 'base-model', BackendRole.BASE, retry_budget=0)
    keys = {BackendRole.FINE_TUNED: 'ft-key', BackendRole.BASE: 'base-key'}
    run_naive_attack(ft, base, _naive_plan(n_queries=4), PromptSource.blank(), api_key=keys,
                     sleep=lambda seconds: None)
    assert len(stub_server.requests) == 8
    expected = {'ft-model': 'Bearer ft-key', 'base-model': 'Bearer base-key'}
    for request in stub_server.requests:
        assert request['headers']['Authorization'] == expected[request['json']['model']]
