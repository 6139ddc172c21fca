import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from driftrec.data import (BOS, SEP, DriftScenario, Encoder, InteractionLog, N_SPECIAL, candidate_seed,
                           full_instances, generate_drift, ingest, kcore_filter, pretrain_instances,
                           sample_candidates, temporal_split, update_instances, write_generated)
from driftrec.errors import DataError

from conftest import random_log


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


# -- ingest -------------------------------------------------------------------


def test_ingest_sorts_and_reindexes(tmp_path):
    p = write(tmp_path, "log.csv", "user_id,item_id,timestamp\nbob,x,30\nalice,y,20\nbob,y,10\n")
    log_ = ingest(p)
    # oracle: stable sort of the raw rows by (user, timestamp)
    raw = [("bob", "x", 30), ("alice", "y", 20), ("bob", "y", 10)]
    expected = sorted(raw, key=lambda r: (r[0], r[2]))
    assert log_.records() == expected
    assert set(log_.users.tolist()) == {0, 1}
    assert log_.user_ids == ("alice", "bob")


def test_ingest_ties_keep_input_order(tmp_path):
    p = write(tmp_path, "log.csv", "user_id,item_id,timestamp\nu,b,5\nu,a,5\nu,c,1\n")
    assert [r[1] for r in ingest(p).records()] == ["c", "b", "a"]


def test_ingest_ignores_rating_and_reads_jsonl(tmp_path):
    csv_p = write(tmp_path, "a.csv", "user_id,item_id,timestamp,rating\nu,i,3,5.0\nu,j,4,1.0\n")
    rows = [{"user_id": "u", "item_id": "i", "timestamp": 3}, {"user_id": "u", "item_id": "j", "timestamp": 4}]
    jl = write(tmp_path, "a.jsonl", "\n".join(json.dumps(r) for r in rows) + "\n")
    assert ingest(csv_p).records() == ingest(jl).records() == [("u", "i", 3), ("u", "j", 4)]


def test_ingest_empty_file(tmp_path):
    with pytest.raises(DataError, match="no records"):
        ingest(write(tmp_path, "e.csv", ""))
    with pytest.raises(DataError, match="no records"):
        ingest(write(tmp_path, "h.csv", "user_id,item_id,timestamp\n"))


def test_ingest_malformed_row_reports_line(tmp_path):
    p = write(tmp_path, "bad.csv", "user_id,item_id,timestamp\nu,i,3\nu,j,soon\n")
    with pytest.raises(DataError, match=r"bad.csv:3: "):
        ingest(p)


def test_ingest_missing_file(tmp_path):
    with pytest.raises(DataError):
        ingest(tmp_path / "nope.csv")


def test_dense_ids_are_a_bijection():
    log_ = random_log(n_users=12, n_items=15)
    assert sorted(set(log_.users.tolist())) == list(range(log_.n_users))
    assert set(log_.items.tolist()) <= set(range(log_.n_items))
    assert len(set(log_.user_ids)) == log_.n_users


# -- k-core -------------------------------------------------------------------


def _brute_kcore(rows, k):
    rows = list(rows)
    while True:
        uc, ic = {}, {}
        for u, i, _ in rows:
            uc[u] = uc.get(u, 0) + 1
            ic[i] = ic.get(i, 0) + 1
        keep = [r for r in rows if uc[r[0]] >= k and ic[r[1]] >= k]
        if len(keep) == len(rows):
            return keep
        rows = keep


def test_kcore_star_graph_empties():
    log_ = InteractionLog.from_records([(f"u{j}", "i", j) for j in range(6)])
    assert len(kcore_filter(log_, 5)) == 0


def test_kcore_unchanged_when_dense_enough():
    rows = [(f"u{u}", f"i{i}", u * 10 + i) for u in range(5) for i in range(5)]
    log_ = InteractionLog.from_records(rows)
    assert kcore_filter(log_, 5).records() == log_.records()
    assert kcore_filter(log_, 1).records() == log_.records()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_kcore_matches_peeling_oracle_and_is_fixpoint(seed, k):
    rng = np.random.default_rng(seed)
    rows = [(f"u{rng.integers(12)}", f"i{rng.integers(10)}", int(t)) for t in range(60)]
    log_ = InteractionLog.from_records(rows)
    out = kcore_filter(log_, k)
    assert sorted(out.records()) == sorted(_brute_kcore(log_.records(), k))
    assert kcore_filter(out, k).records() == out.records()


# -- temporal split ------------------------------------------------------------


def test_split_examples():
    rows = [("a", f"i{t}", t) for t in (1, 2, 3)] + [("b", f"j{t}", t) for t in (1, 2, 3, 7)]
    sp = temporal_split(InteractionLog.from_records(rows), 5)
    a, b = 0, 1
    assert sp.inactive_users == [a] and len(sp.pre[a]) == 3
    assert sp.active_users == [b]
    id_of = {name: k for k, name in enumerate(InteractionLog.from_records(rows).item_ids)}
    assert sp.pre[b].tolist() == [id_of[f"j{t}"] for t in (1, 2, 3)]
    assert sp.post[b].tolist() == [id_of["j7"]]


def test_split_all_active_and_bounds():
    rows = [("a", "x", 1), ("a", "y", 2), ("a", "z", 3), ("a", "w", 9)]
    sp = temporal_split(InteractionLog.from_records(rows), 5)
    assert sp.inactive_users == [] and sp.active_users == [0]
    with pytest.raises(DataError):
        temporal_split(InteractionLog.from_records(rows), 50)


def test_split_excludes_short_histories():
    rows = [("a", "x", 1), ("a", "y", 9), ("b", "x", 1), ("b", "y", 2), ("b", "z", 3)]
    sp = temporal_split(InteractionLog.from_records(rows), 5)
    assert sp.excluded == [0] and sp.users == [1]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(60, 180))
def test_split_partition_concatenation_and_leave_one_out(seed, T):
    log_ = random_log(seed=seed)
    sp = temporal_split(log_, T)
    seqs = log_.user_sequences()
    assert set(sp.active_users) | set(sp.inactive_users) == set(sp.users)
    assert not set(sp.active_users) & set(sp.inactive_users)
    for u in sp.users:
        items, ts = seqs[u]
        assert sp.is_active(u) == bool((ts > T).any())
        assert np.array_equal(sp.full(u), np.concatenate([sp.pre[u], sp.post[u]]))
        assert np.array_equal(sp.full(u), items)
        pre_part, post_part = sp.train_parts(u)
        assert np.array_equal(np.concatenate([pre_part, post_part]), sp.train_sequence(u))
        assert sp.test_item(u) == items[-1] and sp.valid_item(u) == items[-2]
    enc = Encoder(log_.n_items)
    for x in pretrain_instances(sp, enc) + full_instances(sp, enc):
        u = x.user_id
        seen = set(x.input_tokens) | set(x.target_tokens)
        assert sp.test_item(u) + N_SPECIAL not in seen
        assert sp.valid_item(u) + N_SPECIAL not in seen


def test_split_horizon_hides_later_events():
    rows = [("a", "x", 1), ("a", "y", 2), ("a", "z", 3), ("a", "w", 6), ("a", "v", 12)]
    sp = temporal_split(InteractionLog.from_records(rows), 5, horizon=10)
    assert len(sp.post[0]) == 1


def test_split_json_roundtrip(toy_split):
    from driftrec.data import TemporalSplit
    back = TemporalSplit.from_json(json.loads(json.dumps(toy_split.to_json())))
    assert back.users == toy_split.users and back.active_users == toy_split.active_users
    for u in toy_split.users:
        assert np.array_equal(back.full(u), toy_split.full(u))
        assert back.history[u] == toy_split.history[u]


# -- candidates ----------------------------------------------------------------


def _split_with(n_items, history, target):
    from driftrec.data import TemporalSplit
    pre = np.array([*history, target], dtype=np.int64)
    return TemporalSplit(10, None, n_items, {0: pre}, {0: pre[:0]}, {0: frozenset(pre.tolist())})


def test_candidates_forced_set():
    # the user touched nothing besides the target, so the negatives are forced
    sp = _split_with(30, [], 7)
    c = sample_candidates(sp, 0, 0)
    assert sorted(c.negatives) == sorted(set(range(30)) - {7})
    assert sorted(c.presented) == list(range(30))


def test_candidates_too_few_items():
    sp = _split_with(25, [], 3)
    with pytest.raises(DataError):
        sample_candidates(sp, 0, 1)


def test_candidates_deterministic_and_sound():
    log_, _ = generate_drift(DriftScenario(n_users=200, n_items=200, seed=3))
    sp = temporal_split(log_, 100_000, 110_000)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        u = int(rng.choice(sp.users))
        c = sample_candidates(sp, u, candidate_seed(7, u, 1))
        assert len(c.presented) == 30 and c.target in c.presented
        assert len(set(c.negatives)) == 29 and c.target not in c.negatives
        assert not set(c.negatives) & sp.history[u]
    a = sample_candidates(sp, sp.users[0], candidate_seed(7, sp.users[0], 1))
    b = sample_candidates(sp, sp.users[0], candidate_seed(7, sp.users[0], 1))
    assert a.presented == b.presented


# -- encoding ------------------------------------------------------------------


def test_encode_examples():
    enc = Encoder(n_items=20, max_seq_len=50)
    x = enc.encode([4, 7], 9)
    assert x.input_tokens == (BOS, 4 + N_SPECIAL, 7 + N_SPECIAL, SEP)
    assert x.target_tokens == (9 + N_SPECIAL,)
    with pytest.raises(DataError):
        enc.encode([], 1)
    with pytest.raises(DataError):
        enc.encode([25], 1)


def test_encode_truncates_to_suffix():
    enc = Encoder(n_items=100, max_seq_len=50)
    seq = list(range(60))
    x = enc.encode(seq, 99)
    assert [t - N_SPECIAL for t in x.input_tokens[1:-1]] == seq[-50:]


def test_update_instances_target_post_items():
    enc = Encoder(20)
    out = update_instances({0: ([1, 2, 3], [4, 5]), 1: ([6, 7], [])}, enc)
    targets = [(x.user_id, x.target_tokens[0] - N_SPECIAL) for x in out]
    assert targets == [(0, 4), (0, 5), (1, 7)]


# -- generator -----------------------------------------------------------------


def test_generator_active_count_binomial():
    sc = DriftScenario(n_users=2000, n_items=500, n_clusters=4, drift_fraction=0.25, seed=0)
    log_, _ = generate_drift(sc)
    sp = temporal_split(log_, sc.timestamps[0], sc.timestamps[1])
    mean = sc.n_users * sc.drift_fraction
    sd = math.sqrt(sc.n_users * sc.drift_fraction * (1 - sc.drift_fraction))
    assert abs(len(sp.active_users) - mean) <= 3 * sd


def test_generator_no_drift_all_inactive():
    sc = DriftScenario(n_users=100, drift_fraction=0.0, seed=1)
    log_, _ = generate_drift(sc)
    assert log_.timestamps.max() <= sc.timestamps[0]
    assert temporal_split(log_, int(log_.timestamps.max())).active_users == []


def test_generator_byte_identical(tmp_path):
    sc = DriftScenario(n_users=100, seed=5)
    for name in ("a", "b"):
        write_generated(*generate_drift(sc), tmp_path / f"{name}.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.scenario.json").read_bytes() == (tmp_path / "b.scenario.json").read_bytes()


def test_generator_fidelity_and_stationarity():
    sc = DriftScenario(n_users=600, seed=2)
    log_, truth = generate_drift(sc)
    cluster = truth["item_cluster"]
    in_new, total, stay, stay_total = 0, 0, 0, 0
    for (items, ts), uid in zip(log_.user_sequences(), log_.user_ids):
        t = truth["users"][uid]
        labels = [cluster[log_.item_ids[i]] for i in items]
        if t["drift_cycle"] is None:
            assert (ts <= sc.timestamps[0]).all()
            stay += sum(c == t["cluster_before"] for c in labels)
            stay_total += len(labels)
            continue
        bounds = truth["window_bounds"]
        for w, c_w in enumerate(t["window_clusters"]):
            sel = (ts > bounds[w]) & (ts <= bounds[w + 1])
            in_new += sum(labels[j] == c_w for j in np.flatnonzero(sel))
            total += int(sel.sum())
    assert in_new / total >= 0.8
    assert stay / stay_total >= 0.8


@pytest.mark.parametrize("bad", [dict(drift_fraction=1.5), dict(n_items=20), dict(fidelity=0.0),
                                 dict(timestamps=(5, 3))])
def test_generator_rejects_invalid(bad):
    with pytest.raises(DataError):
        generate_drift(DriftScenario(**bad))
