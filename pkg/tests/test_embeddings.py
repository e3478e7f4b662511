
import numpy as np
import pytest

from nmtadapt.embeddings import (
    BilingualDictionary,
    EmbeddingSpace,
    align_to_pivot,
    csls_retrieve,
    evaluate_alignment,
    load_dictionary,
    load_vec,
    mean_pair_cosine,
    oov_vector,
    procrustes,
    rcsls_align,
    rcsls_criterion,
    save_vec,
)
from nmtadapt.errors import DataError, FormatError


def random_rotation(dim, rng):
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))


def make_space(lang, n, dim, rng, prefix="w"):
    return EmbeddingSpace(lang, [f"{prefix}{i}" for i in range(n)], rng.normal(size=(n, dim)))


def identity_dict(src, tgt, n, prefix_s="w", prefix_t="w"):
    return BilingualDictionary(src, tgt, [(f"{prefix_s}{i}", f"{prefix_t}{i}") for i in range(n)])


# -- file formats -----------------------------------------------------------

def test_load_minimal_file(tmp_path):
    p = tmp_path / "a.vec"
    p.write_text("2 3\ncasa 1 2 3\ngato 4 5 6\n", encoding="utf-8")
    s = load_vec(p, "pt")
    assert s.words == ["casa", "gato"] and s.dim == 3


def test_load_rejects_short_row_naming_word(tmp_path):
    p = tmp_path / "a.vec"
    p.write_text("2 3\ncasa 1 2 3\ngato 4 5\n", encoding="utf-8")
    with pytest.raises(FormatError, match="gato"):
        load_vec(p, "pt")


def test_load_rejects_bad_header_with_line_number(tmp_path):
    p = tmp_path / "a.vec"
    p.write_text("two three\ncasa 1 2 3\n", encoding="utf-8")
    with pytest.raises(FormatError, match=":1:"):
        load_vec(p, "pt")


def test_duplicate_word_keeps_first(tmp_path):
    p = tmp_path / "a.vec"
    p.write_text("3 2\ncasa 1 2\ngato 3 4\ncasa 9 9\n", encoding="utf-8")
    s = load_vec(p, "pt")
    assert s.words == ["casa", "gato"]
    np.testing.assert_array_equal(s.raw_vector("casa"), [1.0, 2.0])


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    s = make_space("xx", 5, 4, rng)
    save_vec(s, tmp_path / "x.vec", precision=17)
    t = load_vec(tmp_path / "x.vec", "xx")
    np.testing.assert_array_equal(s.vectors, t.vectors)


def test_dictionary_file_dedupes(tmp_path):
    p = tmp_path / "d.txt"
    p.write_text("a b\na b\nc d\n", encoding="utf-8")
    d = load_dictionary(p, "x", "y")
    assert d.pairs == [("a", "b"), ("c", "d")]


# -- subword fallback -------------------------------------------------------

def test_oov_known_word_returns_row():
    rng = np.random.default_rng(1)
    s = make_space("xx", 4, 5, rng)
    np.testing.assert_array_equal(oov_vector(s, "w2"), s.vectors[2])


def test_oov_deterministic_and_distinguishing():
    rng = np.random.default_rng(2)
    words = ["casa", "casas", "casinha", "gato", "gatos", "perro"]
    s = EmbeddingSpace("pt", words, rng.normal(size=(len(words), 8)))
    a1, a2 = oov_vector(s, "casarao"), oov_vector(s, "casarao")
    np.testing.assert_array_equal(a1, a2)
    # "casaz" and "casay" share every n-gram except those touching the final letter
    assert not np.allclose(oov_vector(s, "casaz"), oov_vector(s, "casay"))
    fresh = EmbeddingSpace("pt", words, s.vectors)
    np.testing.assert_array_equal(oov_vector(fresh, "casarao"), a1)


def test_oov_close_to_morphological_relatives():
    rng = np.random.default_rng(3)
    base = rng.normal(size=(6, 16))
    words = ["walk", "walking", "walked", "talk", "table", "zebra"]
    vecs = base.copy()
    vecs[1] = vecs[0] + 0.1 * rng.normal(size=16)
    vecs[2] = vecs[0] + 0.1 * rng.normal(size=16)
    s = EmbeddingSpace("en", words, vecs)
    v = oov_vector(s, "walks")
    cos = lambda a, b: a @ b / np.linalg.norm(a) / np.linalg.norm(b)
    assert cos(v, vecs[0]) > cos(v, vecs[5])


# -- procrustes -------------------------------------------------------------

def test_procrustes_self_alignment_is_identity():
    rng = np.random.default_rng(4)
    s = make_space("xx", 40, 8, rng)
    w = procrustes(s, s, identity_dict("xx", "xx", 40))
    np.testing.assert_allclose(w, np.eye(8), atol=1e-8)


def test_procrustes_recovers_rotation():
    rng = np.random.default_rng(5)
    src = make_space("aa", 60, 10, rng)
    r = random_rotation(10, rng)
    tgt = EmbeddingSpace("bb", src.words, src.vectors @ r.T)
    w = procrustes(src, tgt, identity_dict("aa", "bb", 60))
    assert np.linalg.norm(w - r) < 1e-6
    assert np.max(np.abs(w.T @ w - np.eye(10))) < 1e-8


def test_procrustes_underdetermined_is_data_error():
    rng = np.random.default_rng(6)
    s = make_space("xx", 3, 300, rng)
    with pytest.raises(DataError, match="3"):
        procrustes(s, s, identity_dict("xx", "xx", 3))


def test_procrustes_skips_missing_words():
    rng = np.random.default_rng(7)
    s = make_space("xx", 20, 4, rng)
    d = BilingualDictionary("xx", "xx", [(f"w{i}", f"w{i}") for i in range(20)] + [("nope", "w1")])
    np.testing.assert_allclose(procrustes(s, s, d), np.eye(4), atol=1e-8)


def test_orthogonal_map_preserves_within_language_cosines():
    rng = np.random.default_rng(8)
    s = make_space("xx", 30, 6, rng)
    r = random_rotation(6, rng)
    a = s.unit_matrix()
    b = s.aligned(r).hub_matrix()
    np.testing.assert_allclose(a @ a.T, b @ b.T, atol=1e-6)


# -- CSLS ---------------------------------------------------------------------

def brute_csls_rank(query, targets, source_pop, k):
    def cos(a, b):
        return float(a @ b / np.linalg.norm(a) / np.linalg.norm(b))

    def mean_topk(x, pop):
        return float(np.mean(sorted((cos(x, p) for p in pop), reverse=True)[:k]))

    scores = []
    for j, y in enumerate(targets):
        scores.append((-(2 * cos(query, y) - mean_topk(query, targets) - mean_topk(y, source_pop)), j))
    return [j for _, j in sorted(scores)]


def test_csls_exact_match_ranks_first():
    vecs = np.eye(5)
    s = EmbeddingSpace("xx", list("abcde"), vecs)
    assert csls_retrieve(vecs[3], s, k=2)[0] == "d"


def test_csls_four_word_toy_matches_brute_force():
    rng = np.random.default_rng(9)
    for trial in range(10):
        targets = rng.normal(size=(4, 3))
        pop = rng.normal(size=(5, 3))
        q = rng.normal(size=3)
        s = EmbeddingSpace("xx", ["p", "q", "r", "s"], targets)
        got = csls_retrieve(q, s, k=2, source=pop)
        want = [s.words[j] for j in brute_csls_rank(q, targets, pop, 2)]
        assert got == want, trial


def test_csls_duplicate_vectors_tie_break_by_index():
    v = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [1.0, 1.0]])
    s = EmbeddingSpace("xx", ["a", "b", "c", "d"], v)
    ranked = csls_retrieve(np.array([0.0, 1.0]), s, k=1)
    assert ranked.index("b") < ranked.index("c")


def test_csls_empty_space_is_data_error():
    with pytest.raises(DataError):
        csls_retrieve(np.ones(2), EmbeddingSpace("xx", [], np.zeros((0, 2))), k=1)


# -- RCSLS ------------------------------------------------------------------

def brute_rcsls(w, x, y, s_pop, t_pop, k):
    def cos(a, b):
        return float(a @ b / np.linalg.norm(a) / np.linalg.norm(b))

    total = 0.0
    for xi, yi in zip(x, y):
        wx = w @ xi
        nn_t = sorted((cos(wx, t) for t in t_pop), reverse=True)[:k]
        nn_s = sorted((cos(w @ s, yi) for s in s_pop), reverse=True)[:k]
        total += 2 * cos(wx, yi) - np.mean(nn_t) - np.mean(nn_s)
    return total / len(x)


def test_rcsls_criterion_matches_brute_force_k1():
    rng = np.random.default_rng(10)
    src = make_space("aa", 5, 3, rng)
    tgt = make_space("bb", 5, 3, rng)
    d = identity_dict("aa", "bb", 5)
    for _ in range(5):
        w = rng.normal(size=(3, 3))
        got = rcsls_criterion(w, src, tgt, d, k=1)
        want = brute_rcsls(w, src.unit_matrix(), tgt.unit_matrix(), src.unit_matrix(), tgt.unit_matrix(), 1)
        assert abs(got - want) < 1e-12


def test_rcsls_zero_steps_is_procrustes():
    rng = np.random.default_rng(11)
    src = make_space("aa", 30, 5, rng)
    tgt = EmbeddingSpace("bb", src.words, src.vectors @ random_rotation(5, rng).T)
    d = identity_dict("aa", "bb", 30)
    np.testing.assert_array_equal(rcsls_align(src, tgt, d, steps=0), procrustes(src, tgt, d))


def noisy_rotated_pair(rng, n=500, dim=32, noise=0.35):
    src = make_space("aa", n, dim, rng)
    r = random_rotation(dim, rng)
    tgt_vecs = (src.unit_matrix() + noise * rng.normal(size=(n, dim)) / np.sqrt(dim)) @ r.T
    return src, EmbeddingSpace("bb", src.words, tgt_vecs), r


def test_rcsls_never_below_initialization():
    rng = np.random.default_rng(12)
    src, tgt, _ = noisy_rotated_pair(rng, n=200, dim=16, noise=0.8)
    d = identity_dict("aa", "bb", 100)
    w0 = procrustes(src, tgt, d)
    w = rcsls_align(src, tgt, d, k=10, steps=30)
    assert rcsls_criterion(w, src, tgt, d) >= rcsls_criterion(w0, src, tgt, d)


def test_rcsls_held_out_csls_at_least_procrustes():
    rng = np.random.default_rng(13)
    src, tgt, _ = noisy_rotated_pair(rng, noise=0.8)
    train = identity_dict("aa", "bb", 200)
    held = BilingualDictionary("aa", "bb", [(f"w{i}", f"w{i}") for i in range(400, 500)])
    rep_p = evaluate_alignment(src.aligned(procrustes(src, tgt, train)), tgt, held)
    rep_r = evaluate_alignment(src.aligned(rcsls_align(src, tgt, train, steps=50)), tgt, held)
    assert rep_r.csls_accuracy >= rep_p.csls_accuracy


# -- evaluation -------------------------------------------------------------

def test_pivot_against_itself_is_perfect():
    rng = np.random.default_rng(14)
    s = make_space("en", 50, 8, rng)
    pivot = s.aligned(np.eye(8))
    rep = evaluate_alignment(pivot, pivot, identity_dict("en", "en", 50))
    assert rep.nn_accuracy == 1.0 and rep.csls_accuracy == 1.0


def test_rotated_space_accuracy_high():
    rng = np.random.default_rng(15)
    src = make_space("aa", 300, 16, rng)
    tgt = EmbeddingSpace("bb", src.words, src.vectors @ random_rotation(16, rng).T)
    d = identity_dict("aa", "bb", 300)
    rep = evaluate_alignment(src.aligned(procrustes(src, tgt, d)), tgt, d)
    assert rep.nn_accuracy >= 0.99


def test_permuted_space_accuracy_zero():
    vecs = np.eye(6)
    tgt = EmbeddingSpace("bb", [f"w{i}" for i in range(6)], vecs)
    src = EmbeddingSpace("aa", [f"w{i}" for i in range(6)], np.roll(vecs, 1, axis=0)).aligned(np.eye(6))
    rep = evaluate_alignment(src, tgt, identity_dict("aa", "bb", 6))
    assert rep.nn_accuracy == 0.0 and rep.csls_accuracy == 0.0


def test_evaluate_empty_dictionary_is_data_error():
    rng = np.random.default_rng(16)
    s = make_space("xx", 5, 3, rng)
    with pytest.raises(DataError):
        evaluate_alignment(s, s, BilingualDictionary("xx", "xx", []))


def test_hub_composition_brings_translations_together():
    rng = np.random.default_rng(17)
    n, dim = 200, 12
    concepts = rng.normal(size=(n, dim))
    spaces, dicts = {}, {}
    for lang in ("en", "aa", "bb"):
        r = random_rotation(dim, rng)
        vecs = (concepts + 0.2 * rng.normal(size=(n, dim))) @ r.T
        spaces[lang] = EmbeddingSpace(lang, [f"{lang}{i}" for i in range(n)], vecs)
        if lang != "en":
            dicts[lang] = BilingualDictionary(lang, "en", [(f"{lang}{i}", f"en{i}") for i in range(100)])
    aligned = align_to_pivot(spaces, "en", dicts, method="procrustes")
    held = [(f"aa{i}", f"bb{i}") for i in range(100, 200)]
    rand = [(f"aa{i}", f"bb{(i * 7 + 3) % 200}") for i in range(100, 200)]
    assert mean_pair_cosine(aligned["aa"], aligned["bb"], held) > mean_pair_cosine(aligned["aa"], aligned["bb"], rand) + 0.3
    np.testing.assert_array_equal(aligned["en"].transform, np.eye(dim))
