import io
import itertools

import pytest
from hypothesis import given, settings, strategies as st

from hbert.ontology import (MASK, PAD, UNK, CycleDetected, DuplicateChildLine, EmptyVisit,
                            MultipleRoots, OrphanToken, SemanticPath, SystemId, TokenMode,
                            UnknownCode, Vocabulary, build_vocabulary, decompose, dump_tree,
                            parse_hierarchy, truncate, visit_token_set)


# -- parse_hierarchy ---------------------------------------------------------

def test_parse_chain_depth_four():
    tree = parse_hierarchy("root\t*\nI00-I99\troot\nI21\tI00-I99\nI21.0\tI21\n")
    assert max(tree.depth.values()) == 4
    assert tree.root == "root"
    assert tree.children["I21"] == ("I21.0",)


def test_parse_accepts_stream_and_comments():
    src = io.StringIO("# comment\n\nroot\t*\nA\troot\n")
    tree = parse_hierarchy(src)
    assert tree.depth == {"root": 1, "A": 2}


def test_two_cycle():
    with pytest.raises(CycleDetected):
        parse_hierarchy("A\tB\nB\tA\n")


def test_cycle_hanging_off_a_valid_root():
    with pytest.raises(CycleDetected):
        parse_hierarchy("r\t*\nA\tB\nB\tC\nC\tA\n")


def test_multiple_roots():
    with pytest.raises(MultipleRoots):
        parse_hierarchy("A\t*\nB\t*\n")


def test_orphan():
    with pytest.raises(OrphanToken):
        parse_hierarchy("r\t*\nA\tmissing\n")


def test_duplicate_child_line():
    with pytest.raises(DuplicateChildLine):
        parse_hierarchy("r\t*\nA\tr\nA\tr\n")


def test_fixture_trees_are_valid(trees):
    dx, rx = trees
    assert dx.system.id is SystemId.DIAGNOSIS and dx.system.max_depth == 3
    assert rx.system.id is SystemId.PRESCRIPTION and rx.system.max_depth == 4
    for tree in trees:
        for tok, d in tree.depth.items():
            if tok != tree.root:
                assert tree.depth[tree.parent[tok]] == d - 1
    assert not set(dx.depth) & set(rx.depth)


def test_dump_roundtrip(trees):
    dx, _ = trees
    again = parse_hierarchy(dump_tree(dx), SystemId.DIAGNOSIS)
    assert dict(again.parent) == dict(dx.parent)


# -- decompose / truncate ------------------------------------------------------

def test_decompose_golden(golden_tree):
    assert decompose("I21.02", golden_tree).tokens == ("root", "I00-I99", "I21", "I21.0", "I21.02")


def test_decompose_root(golden_tree):
    assert decompose("root", golden_tree).tokens == ("root",)


def test_decompose_unknown(golden_tree):
    with pytest.raises(UnknownCode):
        decompose("Z99", golden_tree)


def test_truncate_depth_two(golden_tree):
    path = decompose("I21.02", golden_tree)
    assert truncate(path, 2).tokens == ("root", "I00-I99")


def test_truncate_depth_four(golden_tree):
    path = decompose("I21.02", golden_tree)
    assert truncate(path, 4).tokens == ("root", "I00-I99", "I21", "I21.0")


def test_truncate_noop_when_deep_enough(golden_tree):
    path = decompose("I21", golden_tree)
    assert truncate(path, 7) == path


def test_fixture_contains_fig1_code(trees):
    dx, _ = trees
    assert decompose("I21.02", dx).tokens == ("ICD10", "I00-I99", "I21", "I21.0", "I21.02")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.text(min_size=1, max_size=3), min_size=1, max_size=8), st.integers(1, 10))
def test_truncate_idempotent(tokens, d):
    p = SemanticPath("x", tuple(tokens))
    assert truncate(truncate(p, d), d) == truncate(p, d)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_truncated_paths_start_at_root(trees, data):
    tree = data.draw(st.sampled_from(trees))
    code = data.draw(st.sampled_from(tree.tokens()))
    d = data.draw(st.integers(1, 6))
    assert truncate(decompose(code, tree), d).tokens[0] == tree.root


# -- vocabulary --------------------------------------------------------------

def test_vocab_single_chain():
    tree = parse_hierarchy("r\t*\na\tr\nb\ta\n")
    vocab = build_vocabulary([tree], {SystemId.DIAGNOSIS: 2})
    assert len(vocab) == 3 + 2
    assert (vocab["[PAD]"], vocab["[MASK]"], vocab["[UNK]"]) == (PAD, MASK, UNK)


def test_vocab_two_trees():
    a = parse_hierarchy("r1\t*\na\tr1\nb\ta\nc\tb\nd\tc\n", SystemId.DIAGNOSIS, max_depth=5)
    b = parse_hierarchy("r2\t*\nx\tr2\ny\tx\n", SystemId.PRESCRIPTION, max_depth=3)
    assert len(build_vocabulary([a, b])) == 3 + 5 + 3


def test_vocab_insertion_order_independent(trees):
    dx, rx = trees
    v1 = build_vocabulary([dx, rx])
    v2 = build_vocabulary([rx, dx])
    # oracle: sort (system, token) then assign ids after the specials
    expected = {}
    for tree in (dx, rx):
        expected.update({t: None for t in sorted(t for t in tree.tokens() if tree.depth[t] <= tree.system.max_depth)})
    expected = {t: i + 3 for i, t in enumerate(expected)}
    assert dict(v1.token_to_id) == dict(v2.token_to_id)
    assert {t: i for t, i in v1.token_to_id.items() if i >= 3} == expected


def test_vocab_only_retained_depths(trees):
    dx, rx = trees
    vocab = build_vocabulary([dx, rx])
    assert "I21" in vocab.token_to_id and "I21.0" not in vocab.token_to_id
    assert "A10B" in vocab.token_to_id and "A10BA" not in vocab.token_to_id


def test_vocab_tsv_roundtrip(trees):
    vocab = build_vocabulary(trees)
    text = vocab.to_tsv()
    ids = [int(line.split("\t")[1]) for line in text.splitlines()]
    assert ids == sorted(ids) == list(range(len(vocab)))
    assert Vocabulary.from_tsv(text).token_to_id == vocab.token_to_id


# -- visit_token_set ---------------------------------------------------------

def _tok(vocab, ids):
    return [vocab.id_to_token[i] for i in ids]


def test_union_dedups_shared_chapter(trees):
    vocab = build_vocabulary(trees)
    ids, _ = visit_token_set(["I21.02", "I25.1"], trees, None, vocab)
    toks = _tok(vocab, ids)
    assert toks.count("I00-I99") == 1 and toks.count("ICD10") == 1
    assert toks == ["I00-I99", "I21", "I25", "ICD10"]


def test_single_code_chain(trees):
    vocab = build_vocabulary(trees)
    ids, edges = visit_token_set(["I21.02"], trees, None, vocab)
    assert len(ids) == 3
    loops = [e for e in edges if e[0] == e[1]]
    tree_edges = [e for e in edges if e[0] != e[1]]
    assert len(loops) == 3 and len(tree_edges) == 2


def test_single_code_leaf_only(trees):
    vocab = build_vocabulary(trees)
    ids, edges = visit_token_set(["I21.02"], trees, None, vocab, TokenMode.LEAF_ONLY)
    assert _tok(vocab, ids) == ["I21"] and edges == []


def test_diagnosis_before_prescription(trees):
    vocab = build_vocabulary(trees)
    ids, _ = visit_token_set(["A10BA", "E11.9"], trees, None, vocab, TokenMode.LEAF_ONLY)
    assert _tok(vocab, ids) == ["E11", "A10B"]


def test_unknown_code_maps_to_unk(trees):
    vocab = build_vocabulary(trees)
    ids, edges = visit_token_set(["I10", "NOPE"], trees, None, vocab)
    assert ids[-1] == UNK
    unk = len(ids) - 1
    assert [e for e in edges if unk in e] == [(unk, unk)]


def test_empty_visit(trees):
    with pytest.raises(EmptyVisit):
        visit_token_set([], trees, None, build_vocabulary(trees))


code_lists = st.lists(st.sampled_from(
    ["I21.02", "I21.4", "I10", "E11.9", "E78.5", "L20.8", "M05.7", "M06.0", "A10BA", "L04AX", "H02AB", "D07AC"]),
    min_size=1, max_size=6)


@settings(max_examples=80, deadline=None)
@given(code_lists, st.randoms(use_true_random=False))
def test_decomposed_permutation_invariant(trees, codes, rnd):
    vocab = build_vocabulary(trees)
    shuffled = list(codes)
    rnd.shuffle(shuffled)
    assert visit_token_set(codes, trees, None, vocab) == visit_token_set(shuffled, trees, None, vocab)


@settings(max_examples=80, deadline=None)
@given(code_lists)
def test_edges_join_adjacent_depths(trees, codes):
    vocab = build_vocabulary(trees)
    ids, edges = visit_token_set(codes, trees, None, vocab)
    depth = {}
    for tree in trees:
        depth.update(tree.depth)
    for i, j in edges:
        if i != j:
            a, b = vocab.id_to_token[ids[i]], vocab.id_to_token[ids[j]]
            assert abs(depth[a] - depth[b]) == 1
    assert sorted(i for i, j in edges if i == j) == list(range(len(ids)))


@settings(max_examples=80, deadline=None)
@given(code_lists)
def test_leaf_only_no_larger(trees, codes):
    vocab = build_vocabulary(trees)
    leaf, _ = visit_token_set(codes, trees, None, vocab, TokenMode.LEAF_ONLY)
    full, _ = visit_token_set(codes, trees, None, vocab, TokenMode.DECOMPOSED)
    assert len(leaf) <= len(full)
    assert set(leaf) <= set(full)


def test_shallow_truncation_dedups_leaves(trees):
    vocab = build_vocabulary(trees)
    ids, _ = visit_token_set(["I21.02", "I21.4"], trees, None, vocab, TokenMode.LEAF_ONLY)
    assert _tok(vocab, ids) == ["I21"]
    ids, _ = visit_token_set(["I21.02", "I25.1"], trees, {SystemId.DIAGNOSIS: 2}, vocab, TokenMode.LEAF_ONLY)
    assert _tok(vocab, ids) == ["I00-I99"]


def test_all_permutations_small(trees):
    vocab = build_vocabulary(trees)
    codes = ["I21.02", "A10BA", "L20.8"]
    outs = {str(visit_token_set(list(p), trees, None, vocab)) for p in itertools.permutations(codes)}
    assert len(outs) == 1
