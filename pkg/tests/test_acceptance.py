"""Acceptance gate: one scripted check per release criterion.

Each test is named test_criterion_NN_label; the conftest hook prints a
PASS/FAIL summary line per criterion after the run.
"""

import dataclasses
import json
import random
import string
import time
from pathlib import Path

import pytest

from semaq import (AgentConfig, AgentRuntime, ContextStore, MinCost, MaxQuality,
                   MockBackend, MockRule, MockScript, ModelSpec, OperatorStats,
                   PolicyInfeasibleError, VectorIndex, Weighted, bind_plan,
                   choose_plan, context_create, enumerate_physical_plans,
                   estimate, hashing_embed, make_source_record, parse_pipeline,
                   pipeline_execute, print_pipeline, validate_plan)
from semaq.bench import (MARKER_DEAL, OFFICIAL_2001, OFFICIAL_2024,
                         expected_email_call_counts, gen_email_corpus,
                         run_bench, run_email_prototype, run_experiment)
from semaq.core import cosine_to_score
from semaq.lang import (FIELD_TYPES, Compute, Limit, Project, Scan, Search,
                        SemFilter, SemMap, is_semantic, make_plan)
from semaq.optimizer import StatsEntry

PIPELINES_DIR = Path(__file__).resolve().parent.parent / "pipelines"

STRONG = ModelSpec("strong", 0.002, 0.004, 0.95, 1.0)


@pytest.fixture(scope="module")
def email_scenario():
    return run_experiment("email", seed=7, n=250, rho=0.156)


@pytest.fixture(scope="module")
def ratio_scenario():
    return run_experiment("ratio", seed=7)


# --- 1: filtered records never reach downstream operators ---------------------------

def test_criterion_01_short_circuit():
    start = time.perf_counter()
    corpus = gen_email_corpus(seed=7, n=250, rho=0.156)
    outcome = run_email_prototype(corpus)
    elapsed = time.perf_counter() - start
    survivors = sum(1 for rec in corpus.records
                    if MARKER_DEAL in rec.fields["text"])
    assert survivors == 39
    assert outcome.semantic_calls == 250 + survivors == 289
    assert elapsed < 5.0


# --- 2: pipeline halves calls and cost versus the sweeping agent --------------------

def test_criterion_02_cost_saving(email_scenario):
    proto, sweep = email_scenario.strategies[0], email_scenario.strategies[1]
    oracle = expected_email_call_counts(gen_email_corpus(seed=7, n=250, rho=0.156))
    assert proto.semantic_calls == oracle["prototype-pipeline"]
    assert sweep.semantic_calls == oracle["agent-semantic-tools"]
    assert proto.semantic_calls * 2 <= sweep.semantic_calls
    assert proto.total_cost * 2 <= sweep.total_cost
    saving = 1.0 - proto.semantic_calls / sweep.semantic_calls
    assert saving == 1.0 - (oracle["prototype-pipeline"]
                            / oracle["agent-semantic-tools"])
    assert saving == 0.6146666666666667


# --- 3: pipeline is exact; the generic agent is high-precision, low-recall ----------

def test_criterion_03_quality_ordering(email_scenario):
    proto, basic = email_scenario.strategies[0], email_scenario.strategies[2]
    assert proto.f1 == 1.0
    assert basic.f1 <= 0.65
    assert basic.precision >= basic.recall
    assert basic.f1 < proto.f1


# --- 4: compute answers with the planted ratio; map-everything stays ambiguous ------

def test_criterion_04_ratio_disambiguation(ratio_scenario):
    agent, flat = ratio_scenario.strategies[0], ratio_scenario.strategies[1]
    planted = OFFICIAL_2024 / OFFICIAL_2001
    assert agent.ratios == (planted,)  # zero error against the planted value
    assert len(flat.ratios) >= 2
    assert planted in flat.ratios


# --- 5: plan choice equals brute force over every candidate -------------------------

def _random_setup(rng):
    models = [
        ModelSpec(f"m{i}", rng.uniform(1e-4, 5e-3), rng.uniform(1e-4, 8e-3),
                  rng.uniform(0.5, 0.99), rng.uniform(0.1, 2.0))
        for i in range(rng.randint(1, 4))
    ]
    ops = [Scan("src")]
    for j in range(rng.randint(1, 3)):
        kind = rng.choice(("filter", "map", "filter", "map", "compute"))
        if kind == "filter":
            ops.append(SemFilter(f"pred {j}"))
        elif kind == "map":
            ops.append(SemMap(f"derive {j}", ((f"out{j}", "text"),)))
        else:
            ops.append(Compute(f"answer {j}"))
    if rng.random() < 0.3:
        ops.insert(rng.randint(1, len(ops)), Limit(rng.randint(1, 50)))
    plan = make_plan(ops)
    entries = {}
    for idx, op in enumerate(plan.ops):
        if not is_semantic(op):
            continue
        for model in models:
            entries[(idx, model.model_id)] = StatsEntry(
                selectivity=(rng.uniform(0.05, 0.95)
                             if isinstance(op, SemFilter) else None),
                quality=rng.uniform(0.3, 1.0),
                cost_per_record=rng.uniform(1e-5, 1e-2),
                latency_per_record=rng.uniform(0.05, 2.0),
                sample_size=rng.randint(0, 30),
            )
    return plan, models, entries, rng.randint(1, 400)


def test_criterion_05_optimizer_matches_brute_force():
    rng = random.Random(501)
    feasible_cases = infeasible_cases = 0
    for _ in range(1000):
        plan, models, entries, n = _random_setup(rng)
        stats = OperatorStats(entries)
        candidates = enumerate_physical_plans(plan, models)
        assert len(candidates) <= 64
        estimates = [estimate(cand, stats, n) for cand in candidates]
        pairs = list(zip(candidates, estimates))
        roll = rng.randrange(3)
        if roll == 0:
            policy = MinCost(quality_floor=rng.uniform(0.0, 1.0))
            feasible = [(p, e) for p, e in pairs
                        if e.quality >= policy.quality_floor]
            key = lambda pe: (pe[1].cost, pe[1].latency, pe[0].plan_id)
        elif roll == 1:
            policy = MaxQuality(cost_budget=rng.uniform(0.0, 1.0))
            feasible = [(p, e) for p, e in pairs if e.cost <= policy.cost_budget]
            key = lambda pe: (-pe[1].quality, pe[1].cost, pe[0].plan_id)
        else:
            policy = Weighted(cost_weight=rng.uniform(0.0, 1.0),
                              latency_weight=rng.uniform(0.0, 1.0),
                              quality_weight=rng.uniform(0.0, 1.0))
            feasible = pairs
            key = lambda pe: (policy.score(pe[1]), pe[0].plan_id)
        if not feasible:
            infeasible_cases += 1
            with pytest.raises(PolicyInfeasibleError):
                choose_plan(candidates, estimates, policy)
            continue
        feasible_cases += 1
        expected = sorted(feasible, key=key)[0][0]
        assert choose_plan(candidates, estimates, policy).plan_id == expected.plan_id
    assert feasible_cases > 0 and infeasible_cases > 0


# --- 6: estimator matches hand arithmetic and stays monotone ------------------------

def test_criterion_06_estimator_laws():
    cheap = ModelSpec("cheap", 0.0004, 0.0008, 0.80, 0.5)
    plan = parse_pipeline('scan(d) | sem_filter("keep") | sem_map("derive", {a: text})')
    stats = OperatorStats({
        (1, "cheap"): StatsEntry(0.2, 0.80, 0.0001, 0.5, 25),
        (1, "strong"): StatsEntry(0.2, 0.95, 0.002, 1.0, 25),
        (2, "cheap"): StatsEntry(None, 0.80, 0.0001, 0.5, 25),
        (2, "strong"): StatsEntry(None, 0.95, 0.002, 1.0, 25),
    })
    candidates = enumerate_physical_plans(plan, [cheap, STRONG])
    estimates = [estimate(cand, stats, 100) for cand in candidates]
    # hand arithmetic: 100 filter calls, then 20 survivors through the map
    assert estimates[3].cost == pytest.approx(0.24, abs=1e-9)
    assert estimates[3].quality == pytest.approx(0.9025, abs=1e-12)
    assert estimates[0].cost == pytest.approx(0.012, abs=1e-12)
    assert choose_plan(candidates, estimates, MinCost(0.5)) is candidates[0]
    assert choose_plan(candidates, estimates, MinCost(0.9)) is candidates[3]

    rng = random.Random(606)
    kinds_seen = set()
    for _ in range(1000):
        plan, models, entries, n = _random_setup(rng)
        candidates = enumerate_physical_plans(plan, models)
        cand = candidates[rng.randrange(len(candidates))]
        base = estimate(cand, OperatorStats(entries), n)
        used = [(i, pop.model.model_id) for i, pop in enumerate(cand.ops)
                if is_semantic(pop.logical)]
        kind = rng.choice(("cost", "selectivity", "n", "quality", "pool"))
        filter_keys = [key for key in used if entries[key].selectivity is not None]
        if kind == "selectivity" and not filter_keys:
            kind = "cost"
        kinds_seen.add(kind)
        if kind == "cost":
            key = rng.choice(used)
            bumped = dataclasses.replace(
                entries[key],
                cost_per_record=entries[key].cost_per_record * rng.uniform(1.5, 4.0))
            after = estimate(cand, OperatorStats({**entries, key: bumped}), n)
            assert after.cost >= base.cost
            assert after.quality == base.quality
        elif kind == "selectivity":
            key = rng.choice(filter_keys)
            bumped = dataclasses.replace(
                entries[key],
                selectivity=min(1.0, entries[key].selectivity * rng.uniform(1.2, 3.0)))
            after = estimate(cand, OperatorStats({**entries, key: bumped}), n)
            assert after.cost >= base.cost
            assert after.latency >= base.latency
        elif kind == "n":
            after = estimate(cand, OperatorStats(entries), n + rng.randint(1, 300))
            assert after.cost >= base.cost
            assert after.latency >= base.latency
        elif kind == "quality":
            key = rng.choice(used)
            bumped = dataclasses.replace(
                entries[key],
                quality=min(1.0, entries[key].quality * rng.uniform(1.05, 1.6)))
            after = estimate(cand, OperatorStats({**entries, key: bumped}), n)
            assert after.quality >= base.quality
            assert after.cost == base.cost
        else:
            stats = OperatorStats(entries)
            narrow = estimate(cand, stats, n, pool_width=2)
            wide = estimate(cand, stats, n, pool_width=16)
            assert wide.latency <= narrow.latency
            assert wide.cost == narrow.cost
    assert kinds_seen == {"cost", "selectivity", "n", "quality", "pool"}


# --- 7: retrieval equals an exhaustive cosine scan ----------------------------------

def _exhaustive_rank(query, k, tau, vectors, ids, embed=hashing_embed):
    qvec = embed(query)
    scored = []
    for seq, (vec, cid) in enumerate(zip(vectors, ids)):
        sim = cosine_to_score(float(vec @ qvec))
        if sim >= tau:
            scored.append((seq, cid, sim))
    scored.sort(key=lambda row: (-row[2], row[0], row[1]))
    return scored[:k]


def _hits(results):
    return [(entry.seq, entry.context_id, sim) for entry, sim in results]


def test_criterion_07_retrieval_matches_exhaustive_cosine(tmp_path):
    rng = random.Random(707)
    words = [f"topic{i:03d}" for i in range(80)]
    base_records = [make_source_record({"text": "seed body"}, origin="seed#0")]

    store = ContextStore(tmp_path / "cache", hashing_embed)
    descriptions, ids = [], []
    for i in range(1000):
        phrase = " ".join(rng.choice(words) for _ in range(rng.randint(3, 10)))
        desc = f"{phrase} (entry {i})"
        ctx = context_create(base_records, desc)
        entry = store.register(ctx)
        assert entry.seq == i
        descriptions.append(desc)
        ids.append(ctx.id)
    vectors = [hashing_embed(desc) for desc in descriptions]

    queries = []
    for _ in range(60):
        query = " ".join(rng.choice(words) for _ in range(rng.randint(1, 6)))
        k = rng.randint(1, 25)
        tau = rng.choice([0.0, 0.5, 0.75, rng.uniform(0.4, 0.95)])
        queries.append((query, k, tau))
    for query, k, tau in queries:
        assert _hits(store.retrieve(query, k=k, tau=tau)) == \
            _exhaustive_rank(query, k, tau, vectors, ids)

    # self-match similarity
    for i in rng.sample(range(1000), 25):
        hits = _hits(store.retrieve(descriptions[i], k=1000, tau=0.0))
        score = next(sim for seq, _, sim in hits if seq == i)
        assert score == pytest.approx(1.0, abs=1e-6)

    # identical vectors tie-break by registration order
    def collapsing(text):
        return hashing_embed(text.split(" #", 1)[0])

    tie_store = ContextStore(tmp_path / "ties", collapsing)
    tie_ids, tie_vectors = [], []
    for i in range(120):
        desc = f"group {i % 30:02d} shared phrasing #{i}"
        ctx = context_create(base_records, desc)
        tie_store.register(ctx)
        tie_ids.append(ctx.id)
        tie_vectors.append(collapsing(desc))
    for group in rng.sample(range(30), 8):
        query = f"group {group:02d} shared phrasing"
        got = _hits(tie_store.retrieve(query, k=10, tau=0.0))
        assert got == _exhaustive_rank(query, 10, 0.0, tie_vectors, tie_ids,
                                       embed=collapsing)
        assert [seq for seq, _, sim in got if sim == 1.0] == \
            [group, group + 30, group + 60, group + 90]

    # close and reopen bit-exactly
    entries_file = tmp_path / "cache" / "entries.jsonl"
    vectors_file = tmp_path / "cache" / "vectors.bin"
    before = (entries_file.read_bytes(), vectors_file.read_bytes())
    reopened = ContextStore(tmp_path / "cache", hashing_embed)
    assert (entries_file.read_bytes(), vectors_file.read_bytes()) == before
    assert len(reopened) == 1000
    for query, k, tau in queries[:12]:
        assert _hits(reopened.retrieve(query, k=k, tau=tau)) == \
            _hits(store.retrieve(query, k=k, tau=tau))


# --- 8: agent loop respects bounds; derived contexts extend their parent ------------

def _fenced(doc):
    return "```json\n" + json.dumps(doc) + "\n```"


def _agent_backend(replies):
    tail = [_fenced({"thought": "wrap up", "final_answer": "all set"})] * 25
    rules = [MockRule(match="AVAILABLE TOOLS", response=reply, max_calls=1)
             for reply in list(replies) + tail]
    return MockBackend(MockScript(rules), {"strong": STRONG})


def test_criterion_08_agent_loop_properties():
    rng = random.Random(808)
    records = [make_source_record({"path": f"f{i}.txt", "text": f"file {i} body"},
                                  origin=f"f{i}#0") for i in range(5)]
    index = VectorIndex.build(records, hashing_embed)
    garbage = (
        "thinking aloud with no action block",
        "```json\nnot even json\n```",
        "```json\n[1, 2, 3]\n```",
        _fenced({"thought": "lost"}),
    )

    def valid_tool(case):
        return rng.choice((
            {"thought": "survey", "tool": "list_sources", "args": {}},
            {"thought": "read", "tool": "read_source",
             "args": {"id": rng.choice(records).id}},
            {"thought": "math", "tool": "evaluate",
             "args": {"expression": f"{case} + 1"}},
            {"thought": "find", "tool": "index_search",
             "args": {"query": "file body", "k": 2}},
            {"thought": "bogus", "tool": "no_such_tool", "args": {}},
        ))

    answered = step_limited = parse_aborts = budget_aborts = recovered = 0
    for case in range(500):
        replies = []
        for _ in range(rng.randint(0, 6)):
            roll = rng.random()
            if roll < 0.35:
                replies.append(rng.choice(garbage))
            elif roll < 0.85:
                replies.append(_fenced(valid_tool(case)))
            else:
                replies.append(_fenced({"thought": "done",
                                        "final_answer": {"text": "t", "value": case}}))
        backend = _agent_backend(replies)
        ctx = context_create(records, f"five files, case {case}", index=index)
        budget = 0.0 if case % 50 == 49 else None
        config = AgentConfig(model=STRONG, max_steps=rng.randint(1, 5),
                             cost_budget=budget)
        trace = AgentRuntime(backend).run(f"inspect the files ({case})", ctx, config)

        assert len(trace.steps) <= config.max_steps
        assert trace.usage.calls <= config.max_steps * (1 + config.reask_limit)
        assert trace.outcome in ("answered", "step-limit", "aborted")
        assert all(step.index == i for i, step in enumerate(trace.steps))
        assert all(isinstance(step.observation, str) for step in trace.steps)
        if budget == 0.0:
            assert trace.outcome == "aborted" and trace.abort_reason == "budget"
            assert trace.usage.calls == 0
            budget_aborts += 1
        elif trace.outcome == "answered":
            assert trace.final_answer() is not None
            answered += 1
            if trace.usage.calls > len(trace.steps):
                recovered += 1  # at least one corrective re-ask was resolved
        elif trace.outcome == "step-limit":
            step_limited += 1
        else:
            assert trace.abort_reason == "action-parse"
            parse_aborts += 1
    assert answered and step_limited and parse_aborts and budget_aborts and recovered

    # derived contexts always extend the parent description as a prefix
    for case in range(40):
        ctx = context_create(records, f"corpus slice {case}: five files")
        replies = [_fenced(valid_tool(case)),
                   _fenced({"thought": "done",
                            "final_answer": {"text": f"answer {case}", "value": case}})]
        runtime = AgentRuntime(_agent_backend(replies))
        config = AgentConfig(model=STRONG, max_steps=4)
        if case % 2 == 0:
            result = runtime.compute(ctx, f"count the files ({case})", config)
        else:
            result = runtime.search(ctx, f"scout the files ({case})", config)
        assert result.context.description.startswith(ctx.description)
        assert len(result.context.description) > len(ctx.description)

    ctx = context_create(records, "five files for a pipeline pass")
    backend = MockBackend(MockScript([MockRule(match="keep every file",
                                               response="yes")]),
                          {"strong": STRONG})
    plan = parse_pipeline('scan(ctx) | sem_filter("keep every file")')
    out_ctx, _ = pipeline_execute(bind_plan(plan, {1: STRONG}), ctx, backend)
    assert out_ctx.description.startswith(ctx.description)


# --- 9: printing a parsed program is a fixed point ----------------------------------

_TEXT_CHARS = string.ascii_letters + string.digits + " .,:;!?()#'\"\\-\t\n"


def _rand_text(rng):
    text = "".join(rng.choice(_TEXT_CHARS) for _ in range(rng.randint(1, 40)))
    return text if text.strip() else text + "x"


def _rand_ident(rng):
    head = rng.choice(string.ascii_lowercase + "_")
    tail = "".join(rng.choice(string.ascii_lowercase + string.digits + "_")
                   for _ in range(rng.randint(0, 7)))
    return head + tail


def _rand_idents(rng, count):
    names = set()
    while len(names) < count:
        names.add(_rand_ident(rng))
    return tuple(sorted(names))


def _rand_op(rng):
    roll = rng.randrange(6)
    if roll == 0:
        return SemFilter(_rand_text(rng))
    if roll == 1:
        fields = tuple((name, rng.choice(FIELD_TYPES))
                       for name in _rand_idents(rng, rng.randint(1, 3)))
        return SemMap(_rand_text(rng), fields)
    if roll == 2:
        return Project(_rand_idents(rng, rng.randint(1, 3)))
    if roll == 3:
        return Limit(rng.randint(1, 999))
    if roll == 4:
        return Compute(_rand_text(rng))
    return Search(_rand_text(rng))


def test_criterion_09_parser_round_trip():
    rng = random.Random(909)
    for _ in range(500):
        ops = [Scan(_rand_ident(rng))]
        ops += [_rand_op(rng) for _ in range(rng.randint(1, 6))]
        plan = make_plan(ops)
        text = print_pipeline(plan)
        reparsed = parse_pipeline(text)
        assert reparsed.ops == plan.ops
        assert reparsed.plan_id == plan.plan_id
        assert print_pipeline(reparsed) == text

    shipped = sorted(PIPELINES_DIR.glob("*.pz"))
    assert len(shipped) >= 3
    plans = []
    for path in shipped:
        plan = parse_pipeline(path.read_text(encoding="utf-8"))
        assert validate_plan(plan, known_refs={"emails", "stats"}) == []
        assert parse_pipeline(print_pipeline(plan)).ops == plan.ops
        plans.append(plan)
    # the filter-then-extract program ships
    assert any(any(isinstance(op, SemFilter) for op in plan.ops)
               and any(isinstance(op, SemMap) for op in plan.ops)
               for plan in plans)


# --- 10: identical seeds reproduce every artifact byte for byte ---------------------

def test_criterion_10_benchmark_determinism(tmp_path):
    first = run_bench(seed=7, n=250, rho=0.156, out_dir=tmp_path / "a")
    second = run_bench(seed=7, n=250, rho=0.156, out_dir=tmp_path / "b")
    names_a = sorted(p.name for p in (tmp_path / "a").iterdir())
    names_b = sorted(p.name for p in (tmp_path / "b").iterdir())
    assert names_a == names_b
    assert "results.json" in names_a
    assert any(name.startswith("ledger-") for name in names_a)
    assert any(name.startswith("trace-") for name in names_a)
    for name in names_a:
        assert (tmp_path / "a" / name).read_bytes() == \
            (tmp_path / "b" / name).read_bytes()
    assert first.render_text() == second.render_text()
