import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from st_recipe.corpus import (
    END_OF_WORD,
    BpeModel,
    CorpusError,
    Domain,
    Manifest,
    Sample,
    Tokenizer,
    Vocabulary,
    apply_bpe,
    filter_long,
    join_bpe,
    learn_bpe,
    load_manifest,
    read_features,
    reapply_bpe,
    save_manifest,
    write_features,
)

words = st.text(alphabet="abcdeéxyz", min_size=1, max_size=6)
sentences = st.lists(words, min_size=1, max_size=6).map(" ".join)


def test_learn_bpe_tie_broken_lexicographically():
    model = learn_bpe(["low low lower"], n_merges=2)
    # (l,o)=3 and (o,w)=3 tie; then (lo,w)=3 beats (w,</w>)=2
    assert model.merges == (("l", "o"), ("lo", "w"))


def test_learn_bpe_zero_merges():
    assert learn_bpe(["any text here"], 0).merges == ()


def test_learn_bpe_stops_when_no_pair_repeats():
    assert learn_bpe(["ab"], 5).merges == ()
    exhaustive = learn_bpe(["ab"], 5, min_frequency=1)
    assert exhaustive.merges == (("a", "b"), ("ab", END_OF_WORD))


def test_learn_bpe_empty_corpus():
    with pytest.raises(CorpusError, match="empty corpus"):
        learn_bpe([], 10)
    with pytest.raises(CorpusError, match="empty corpus"):
        learn_bpe(["   "], 10)


def test_apply_bpe_no_merges():
    assert apply_bpe("xyz", BpeModel()) == ["x", "y", "z" + END_OF_WORD]


def test_apply_bpe_merges_in_order():
    model = BpeModel((("l", "o"), ("lo", "w")))
    assert apply_bpe("low", model) == ["low" + END_OF_WORD]
    assert apply_bpe("lower", model) == ["low", "e", "r" + END_OF_WORD]


def test_bpe_duplicate_merge_rejected():
    with pytest.raises(CorpusError):
        BpeModel((("a", "b"), ("a", "b")))


@settings(max_examples=60, deadline=None)
@given(st.lists(sentences, min_size=1, max_size=5), st.integers(0, 30), sentences)
def test_bpe_properties(corpus, n_merges, sentence):
    model = learn_bpe(corpus, n_merges, min_frequency=1)
    assert model == learn_bpe(corpus, n_merges, min_frequency=1)
    assert model.n_merges <= n_merges
    tokens = apply_bpe(sentence, model)
    assert join_bpe(tokens) == " ".join(sentence.split())
    assert reapply_bpe(tokens, model) == tokens


def test_bpe_file_round_trip(tmp_path):
    model = learn_bpe(["low low lower newest newest widest"], 10)
    model.save(tmp_path / "bpe.codes")
    assert BpeModel.load(tmp_path / "bpe.codes") == model


def test_vocabulary_reserved_and_bijection(tmp_path):
    vocab = Vocabulary(["a</w>", "b</w>"])
    assert vocab.tokens[:5] == ["<pad>", "<s>", "</s>", "<unk>", "<blank>"]
    assert len({vocab.tag_id(d) for d in Domain}) == 3
    assert vocab.blank_id not in vocab.encode(["a</w>", "b</w>"])
    ids = vocab.encode(["a</w>", "b</w>", "zz"])
    assert ids[-1] == vocab.unk_id
    assert vocab.decode(ids[:2]) == ["a</w>", "b</w>"]
    assert list(range(len(vocab))) == vocab.encode(vocab.tokens)
    vocab.save(tmp_path / "vocab.txt")
    assert Vocabulary.load(tmp_path / "vocab.txt") == vocab


def test_vocabulary_never_assigns_reserved_ids_to_bpe_tokens():
    bpe = learn_bpe(["ab ab cd"], 5)
    vocab = Vocabulary.build(["ab ab cd"], bpe)
    tok = Tokenizer(bpe, vocab)
    ids = tok.encode("ab cd")
    assert min(ids) >= vocab.n_reserved
    assert tok.decode(ids) == "ab cd"


def _write(tmp_path, name, frames, n_features=4):
    write_features(tmp_path / name, np.ones((frames, n_features), dtype=np.float32))
    return name


def test_feature_file_round_trip(tmp_path):
    x = np.random.default_rng(0).normal(size=(7, 40)).astype(np.float32)
    write_features(tmp_path / "x.fbnk", x)
    raw = (tmp_path / "x.fbnk").read_bytes()
    assert raw[:4] == b"FBNK" and len(raw) == 12 + 7 * 40 * 4
    np.testing.assert_array_equal(read_features(tmp_path / "x.fbnk"), x)


def test_feature_matrix_must_be_finite(tmp_path):
    with pytest.raises(CorpusError):
        write_features(tmp_path / "bad.fbnk", np.array([[np.nan]]))


def test_filter_long_boundary(tmp_path):
    samples = [Sample(f"s{t}", _write(tmp_path, f"s{t}.fbnk", t)) for t in (1999, 2000, 2001)]
    m = Manifest(samples, n_features=4, base_dir=tmp_path)
    out, removed = filter_long(m, 2000)
    assert [s.id for s in out] == ["s1999", "s2000"]
    assert removed == 1
    same, removed = filter_long(out, 2000)
    assert same == out and removed == 0


def test_manifest_round_trip(tmp_path):
    samples = [
        Sample("a", _write(tmp_path, "a.fbnk", 5), "hello world", "hallo welt", Domain.GROUND_TRUTH),
        Sample("b", _write(tmp_path, "b.fbnk", 6), "Hi, you.", "", Domain.SYNTH_CASED, ((0, 0, 3), (1, 3, 6))),
        Sample("c", _write(tmp_path, "c.fbnk", 4), "x", "y", Domain.SYNTH_LOWER),
    ]
    m = Manifest(samples, 4, "v123", "b456")
    save_manifest(m, tmp_path / "m.tsv")
    assert load_manifest(tmp_path / "m.tsv") == m


def test_manifest_unknown_domain(tmp_path):
    (tmp_path / "m.tsv").write_text("a\tf.fbnk\tx\ty\tbogus\n")
    with pytest.raises(CorpusError, match="bogus"):
        load_manifest(tmp_path / "m.tsv")


def test_manifest_malformed_line_reports_line_number(tmp_path):
    (tmp_path / "m.tsv").write_text("# n_features=40\na\tf.fbnk\tx\ty\tground_truth\nbroken line\n")
    with pytest.raises(CorpusError, match="line 3"):
        load_manifest(tmp_path / "m.tsv")


def test_empty_manifest(tmp_path):
    (tmp_path / "m.tsv").write_text("")
    assert len(load_manifest(tmp_path / "m.tsv")) == 0


def test_manifest_rejects_duplicate_ids():
    with pytest.raises(CorpusError, match="duplicate"):
        Manifest([Sample("a", "x"), Sample("a", "y")])


def test_alignments_must_be_nondecreasing():
    with pytest.raises(CorpusError):
        Sample("a", "f", alignments=((0, 5, 8), (1, 2, 4))).validate()
    with pytest.raises(CorpusError):
        Sample("a", "f", alignments=((0, 0, 9),)).validate(n_frames=8)
