from __future__ import annotations

import json

import pytest

from nasxform.errors import ConfigError, Exhausted
from nasxform.ir import ConvSpec, conv_nest
from nasxform.nnet import fisher_potential, toy_network_config
from nasxform.search import (
    SearchConfig,
    SemanticRun,
    _Scorer,
    draw_candidates,
    evaluate,
    filter_and_score,
    load_search_config,
    make_candidate,
    rank,
    run_search,
    score_candidates,
    search_config_from_dict,
    statistics,
)

from rewrites import INJECTED

NET = toy_network_config(channels=8, size=8, depth=4)


@pytest.fixture(scope="module")
def origin():
    return NET.build(), NET.batch()


def test_zero_candidates():
    assert draw_candidates(NET.build(), SearchConfig(candidate_count=0)) == []


def test_draws_are_reproducible_and_valid():
    cfg = SearchConfig(candidate_count=30, seed=11)
    a = draw_candidates(NET.build(), cfg)
    b = draw_candidates(NET.build(), cfg)
    assert [c.dsl for c in a] == [c.dsl for c in b]
    assert len({c.dsl for c in a}) > 20
    for c in a:
        assert all(1 <= len(s) <= cfg.max_length for s in c.sequences)
        for prev, nxt in zip(c.specs, c.specs[1:]):
            assert prev.Co_eff == nxt.Ci and (prev.Ho_eff, prev.Wo_eff) == (nxt.H, nxt.W)
    assert draw_candidates(NET.build(), SearchConfig(candidate_count=30, seed=12))[0].dsl != a[0].dsl


def test_semantic_only_mask_keeps_macs(origin):
    net, batch = origin
    cfg = SearchConfig(candidate_count=20, kinds=("interchange", "tile", "unroll", "fuse", "split"))
    scored = evaluate(net, batch, cfg)
    assert all(not c.has_neural and c.macs == net.macs for c in scored)
    assert all(c.status == "survivor" for c in scored)
    assert all(v["verdict"] == "legal" for c in scored for v in c.verdicts)


def test_identity_only_best_is_original(origin):
    net, batch = origin
    cfg = SearchConfig(candidate_count=1, kinds=())
    report = run_search(cfg, NET)
    assert report.best is not None and report.best.macs == net.macs
    assert report.best.dsl == " ; ".join(["identity"] * 4)
    assert report.best.fisher.total == report.origin_fisher.total


def test_modifiable_mask(origin):
    net, _ = origin
    cfg = SearchConfig(candidate_count=10, modifiable=(False, True, False, False))
    for c in draw_candidates(net, cfg):
        assert [len(s) for s in c.sequences][0] == 0 and len(c.sequences[1]) >= 1
        assert all(len(s) == 0 for s in c.sequences[2:])


def test_exhausted():
    spec = ConvSpec(Ci=1, Co=1, H=1, W=1)
    with pytest.raises(Exhausted):
        draw_candidates([spec], SearchConfig(candidate_count=1, kinds=("group",)))


def test_group_candidate_halves_cost(origin):
    net, batch = origin
    cand = make_candidate(net.specs, ["group(co,ci,2)"] * 4)
    [scored] = score_candidates([cand], net, batch)
    assert scored.macs * 2 == net.macs
    assert all(m * 2 == s.macs for m, s in zip(scored.macs_per_layer, net.specs))
    assert scored.status in ("survivor", "rejected") and scored.fisher is not None


def test_identity_candidate_survives(origin):
    net, batch = origin
    [c] = score_candidates([make_candidate(net.specs, [""] * 4)], net, batch)
    assert c.status == "survivor" and c.macs == net.macs


def test_injected_illegal_reorder_is_rejected(origin):
    net, batch = origin
    scorer = _Scorer(net, batch, SearchConfig())
    spec = net.specs[0]
    bad = INJECTED["init-after-use"](conv_nest(spec))
    fake = "interchange(h,w)"
    scorer.applier.cache[(spec, (fake,))] = bad
    cand = make_candidate(net.specs, [fake, "", "", ""])
    out = scorer.score(cand)
    assert out.status == "rejected" and out.rejected_by == "semantic"
    assert out.verdicts[0]["verdict"] == "illegal"
    assert out.fisher is None


def test_cap_exceeded_is_a_semantic_rejection(origin):
    net, batch = origin
    cand = make_candidate(net.specs, ["tile(h,2)", "", "", ""])
    [out] = score_candidates([cand], net, batch, SearchConfig(cap=10))
    assert out.rejected_by == "semantic" and out.verdicts[0]["verdict"] == "cap-exceeded"


def test_partition_and_ranking_invariants(origin):
    net, batch = origin
    cfg = SearchConfig(candidate_count=40, seed=3)
    scored = evaluate(net, batch, cfg)
    stats = statistics(scored)
    assert stats["rejected_semantic"] + stats["rejected_fisher"] + stats["survivors"] == 40
    ranked = rank(scored)
    base = fisher_potential(net, batch)
    assert ranked == rank(list(reversed(scored)))
    for c in ranked:
        assert all(v["verdict"] == "legal" for v in c.verdicts)
        assert c.fisher.total >= base.total
        if c.has_neural:
            assert c.macs <= net.macs
        else:
            assert c.macs == net.macs
    keys = [(c.macs, -c.fisher.total) for c in ranked]
    assert keys == sorted(keys)
    assert [c.index for c in filter_and_score([s for s in scored], net, batch, cfg)] == [c.index for c in ranked]


def test_parallel_equals_sequential(origin):
    net, batch = origin
    cfg = SearchConfig(candidate_count=12, seed=5)
    one = [c.row() for c in evaluate(net, batch, cfg, jobs=1)]
    two = [c.row() for c in evaluate(net, batch, cfg, jobs=2)]
    assert one == two


def test_report_files_and_determinism(tmp_path):
    cfg = SearchConfig(candidate_count=15, seed=9)
    r1 = run_search(cfg, NET, tmp_path / "a.json")
    r2 = run_search(cfg, NET, tmp_path / "b.json")
    d1 = json.loads((tmp_path / "a.json").read_text())
    d2 = json.loads((tmp_path / "b.json").read_text())
    assert "timing" in d1
    d1.pop("timing"), d2.pop("timing")
    assert d1 == d2
    assert json.dumps(r1.body(), sort_keys=True) == json.dumps(r2.body(), sort_keys=True)
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
    assert d1["statistics"]["candidate_count"] == 15 and "rejection_rate" in d1["statistics"]
    with pytest.raises(OSError, match="cannot write"):
        run_search(SearchConfig(candidate_count=1), NET, tmp_path / "missing" / "x.json")


def test_config_parsing(tmp_path):
    cfg = search_config_from_dict({"schema_version": 1, "candidate_count": 5, "kinds": ["tile"],
                                   "modifiable": [True, False]})
    assert cfg.kinds == ("tile",) and cfg.modifiable == (True, False)
    assert search_config_from_dict(cfg.to_dict()) == cfg
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"schema_version": 1, "search": {"schema_version": 1, "seed": 4}}))
    assert load_search_config(p).seed == 4


@pytest.mark.parametrize("bad", [
    {"candidate_count": 5},
    {"schema_version": 2},
    {"schema_version": 1, "kinds": ["warp"]},
    {"schema_version": 1, "group_factors": [1]},
    {"schema_version": 1, "candidate_count": "many"},
    {"schema_version": 1, "max_length": 0},
    {"schema_version": 1, "cap": 0},
    {"schema_version": 1, "layer_veto": 2.0},
    {"schema_version": 1, "modifiable": [1, 0]},
    {"schema_version": 1, "bogus": 1},
])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        search_config_from_dict(bad)


def test_semantic_runs_split_on_neural_steps(origin):
    net, _ = origin
    c = make_candidate(net.specs, ["tile(h,2) | group(co,ci,2) | unroll(w,2) | fuse(h_o,co)", "", "", ""])
    assert c.runs == (SemanticRun(0, (), ("tile(h,2)",)),
                      SemanticRun(0, ("tile(h,2)", "group(co,ci,2)"), ("unroll(w,2)", "fuse(h_o,co)")))
