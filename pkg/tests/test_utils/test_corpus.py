import logging

import numpy as np
import pytest

from models import AlignmentRow, FragmentMode, RawRecord, RawSentence, SplitSpec, SyntheticSpec
from utils.corpus import (
    BIGRAM_RELATION,
    BOW_RELATION,
    build_fragments,
    concept_words,
    filter_dictionary,
    generate_synthetic,
    prune_relations,
    read_alignments,
    read_corpus,
    restrict_relations,
    split_records,
    write_alignments,
    write_corpus,
)
from utils.encoder import RelationVocab, WordTable
from utils.errors import ConfigError, EmptyCorpusError, InputFormatError


def record(image_id: str, *sentences, tokens=None, fragments=None) -> RawRecord:
    """A record whose sentences are given as triplet lists."""
    return RawRecord(
        image_id=image_id,
        image_fragments=fragments or [[0.0, 1.0], [2.0, 3.0]],
        sentences=[RawSentence(tokens=tokens or [], triplets=list(s)) for s in sentences],
    )


def test_prune_keeps_relation_at_threshold() -> None:
    records = [record("x", [("A", "a", "b")] * 99), record("y", [("B", "c", "d")])]
    vocab, kept = prune_relations(records, 0.01)
    assert vocab.relations == ("A", "B")
    assert [r.image_id for r in kept] == ["x", "y"]


def test_prune_drops_rare_relation_and_empty_sentences(caplog) -> None:
    caplog.set_level(logging.INFO, logger="fragalign")
    records = [
        record("x", [("A", "a", "b")] * 995, [("B", "c", "d")] * 4),
        record("y", [("B", "a", "a")]),
    ]
    vocab, kept = prune_relations(records, 0.01)
    assert vocab.relations == ("A",)
    assert [r.image_id for r in kept] == ["x"]
    assert len(kept[0].sentences) == 1
    assert "dropped record y" in caplog.text
    assert "relation pruning dropped 2 sentences" in caplog.text


def test_prune_everything_raises() -> None:
    with pytest.raises(EmptyCorpusError):
        prune_relations([record("x", [])], 0.01)
    with pytest.raises(ConfigError):
        prune_relations([record("x", [("A", "a", "b")])], 1.0)


def test_prune_is_idempotent() -> None:
    records = [record(f"r{n}", [(rel, "a", "b")] * n) for rel, n in [("A", 300), ("B", 40), ("C", 2), ("D", 5)]]
    vocab, once = prune_relations(records, 0.01)
    vocab_again, twice = prune_relations(once, 0.01)
    assert vocab == vocab_again == RelationVocab(("A", "B", "D"))
    assert once == twice


def test_restrict_relations_uses_given_vocab() -> None:
    records = [record("x", [("A", "a", "b"), ("Z", "a", "b")], [("Z", "c", "c")])]
    kept = restrict_relations(records, RelationVocab(("A",)))
    assert kept[0].sentences[0].triplets == [("A", "a", "b")]
    assert len(kept[0].sentences) == 1


def test_filter_dictionary(word_table, caplog) -> None:
    caplog.set_level(logging.INFO, logger="fragalign")
    clean = [record("x", [("A", "a", "b"), ("A", "c", "d")])]
    assert filter_dictionary(clean, word_table) == clean

    mixed = [record("x", [("A", "a", "oov"), ("A", "c", "d")], [("A", "oov", "oov")])]
    kept = filter_dictionary(mixed, word_table)
    assert kept[0].sentences[0].triplets == [("A", "c", "d")]
    assert len(kept[0].sentences) == 1
    assert "dictionary filtering dropped 1 sentences" in caplog.text
    assert filter_dictionary(kept, word_table) == kept


def test_filter_dictionary_keeps_tokens_for_token_modes(word_table) -> None:
    records = [record("x", [("A", "a", "b")], tokens=["a", "zebra", "c"])]
    kept = filter_dictionary(records, word_table, FragmentMode.bow)
    assert kept[0].sentences[0].tokens == ["a", "c"]
    with pytest.raises(EmptyCorpusError):
        filter_dictionary([record("x", [], tokens=["zebra"])], word_table, FragmentMode.bigram)


def test_bow_and_bigram_fragments() -> None:
    records = [record("x", [], tokens=["a", "b", "c"])]
    bow = build_fragments(records, FragmentMode.bow, 2)
    assert bow.relations.relations == (BOW_RELATION,)
    assert [(f.word1, f.word2) for f in bow.items[0].sentences[0]] == [("a", "a"), ("b", "b"), ("c", "c")]

    bigram = build_fragments(records, FragmentMode.bigram, 2)
    assert bigram.relations.relations == (BIGRAM_RELATION,)
    assert [(f.word1, f.word2) for f in bigram.items[0].sentences[0]] == [("a", "b"), ("b", "c")]


def test_token_modes_need_tokens() -> None:
    with pytest.raises(InputFormatError):
        build_fragments([record("x", [("A", "a", "b")])], FragmentMode.bow, 2)


def test_devise_fragments() -> None:
    table = WordTable(2, {"x": np.array([3.0, 0.0]), "y": np.array([0.0, 1.0])})
    records = [record("img", [], tokens=["x", "y"], fragments=[[1.0, 2.0], [3.0, 6.0]])]
    corpus = build_fragments(records, FragmentMode.devise, 2, table=table)
    item = corpus.items[0]
    assert len(corpus.relations) == 0
    (fragment,) = item.sentences[0]
    np.testing.assert_allclose(fragment.vector, [0.5, 0.5])
    assert np.linalg.norm(fragment.vector) == pytest.approx(np.sqrt(2) / 2)
    (image,) = item.image_fragments
    np.testing.assert_array_equal(image.features, [2.0, 4.0])


def test_fullframe_keeps_last_fragment() -> None:
    records = [record("img", [("A", "a", "b")], fragments=[[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])]
    corpus = build_fragments(records, FragmentMode.fullframe_only, 2, vocab=RelationVocab(("A",)))
    (image,) = corpus.items[0].image_fragments
    np.testing.assert_array_equal(image.features, [0.5, 0.5])


def test_triplet_mode_needs_vocab() -> None:
    with pytest.raises(ConfigError):
        build_fragments([record("x", [("A", "a", "b")])], FragmentMode.triplets, 2)


@pytest.mark.parametrize("mode", [FragmentMode.triplets, FragmentMode.bow, FragmentMode.bigram])
def test_fragments_never_invent_words(mode) -> None:
    synthetic = generate_synthetic(SyntheticSpec(num_items=20, num_concepts=6, fragments_per_image=3, seed=2))
    vocab = RelationVocab(tuple(sorted({t[0] for r in synthetic.records for t in r.sentences[0].triplets})))
    corpus = build_fragments(synthetic.records, mode, synthetic.dim_image, vocab=vocab)
    assert [item.image_id for item in corpus.items] == [r.image_id for r in synthetic.records]
    for item, raw in zip(corpus.items, synthetic.records, strict=True):
        words = set(raw.sentences[0].tokens) | {w for t in raw.sentences[0].triplets for w in t[1:]}
        for fragment in item.sentences[0]:
            assert {fragment.word1, fragment.word2} <= words


def test_synthetic_is_deterministic() -> None:
    spec = SyntheticSpec(num_items=30, seed=7)
    first, second = generate_synthetic(spec), generate_synthetic(spec)
    assert first.records == second.records
    assert first.alignments == second.alignments
    assert list(first.table) == list(second.table)
    for word in first.table:
        np.testing.assert_array_equal(first.table.vector(word), second.table.vector(word))
    assert generate_synthetic(spec.model_copy(update={"seed": 8})).records != first.records


def test_synthetic_without_noise_plants_prototypes() -> None:
    spec = SyntheticSpec(num_items=40, num_concepts=8, noise_sigma=0.0, fullframe=False, seed=3)
    synthetic = generate_synthetic(spec)
    seen: dict[str, np.ndarray] = {}
    for row in synthetic.alignments:
        raw = synthetic.records[row.item]
        _, mod, head = raw.sentences[0].triplets[row.triplet_index]
        feature = np.array(raw.image_fragments[row.fragment_index])
        assert np.linalg.norm(feature) == pytest.approx(1.0)
        assert any(mod == concept_words(c)[0] and head == concept_words(c)[1] for c in range(8))
        if mod in seen:
            np.testing.assert_array_equal(feature, seen[mod])
        seen[mod] = feature


def test_synthetic_ground_truth_stays_inside_item() -> None:
    spec = SyntheticSpec(num_items=25, num_concepts=10, fragments_per_image=4, triplets_per_sentence=2)
    synthetic = generate_synthetic(spec)
    assert len(synthetic.alignments) == 25 * 2
    for row in synthetic.alignments:
        raw = synthetic.records[row.item]
        assert 0 <= row.fragment_index < spec.fragments_per_image
        assert 0 <= row.triplet_index < len(raw.sentences[0].triplets)
    for raw in synthetic.records:
        features = np.array(raw.image_fragments)
        assert features.shape == (5, spec.dim_image)
        np.testing.assert_allclose(features[-1], features[:-1].mean(axis=0))


def test_synthetic_rejects_infeasible_spec() -> None:
    with pytest.raises(ConfigError, match="num_concepts"):
        generate_synthetic(SyntheticSpec(num_concepts=4, fragments_per_image=5))
    with pytest.raises(ConfigError, match="fragments_per_image"):
        generate_synthetic(SyntheticSpec(fragments_per_image=2, triplets_per_sentence=3))


def test_corpus_file(tmp_path) -> None:
    records = [record("x", [("A", "a", "b")], tokens=["a", "b"]), record("y", [("B", "c", "d")])]
    path = tmp_path / "corpus.jsonl"
    write_corpus(path, 2, records)
    assert path.read_text(encoding="utf-8").splitlines()[0] == '{"dims":{"D_img":2}}'
    dim_image, loaded = read_corpus(path)
    assert dim_image == 2
    assert loaded == records


def test_corpus_file_errors(tmp_path) -> None:
    path = tmp_path / "corpus.jsonl"
    write_corpus(path, 3, [record("x", [("A", "a", "b")])])
    with pytest.raises(InputFormatError) as err:
        read_corpus(path)
    assert err.value.line == 2

    path.write_text('{"image_id": "x"}\n', encoding="utf-8")
    with pytest.raises(InputFormatError) as err:
        read_corpus(path)
    assert err.value.line == 1

    path.write_text('{"dims": {"D_img": 2}}\n', encoding="utf-8")
    with pytest.raises(InputFormatError, match="no records"):
        read_corpus(path)


def test_split_records() -> None:
    records = [record(f"r{i}", [("A", "a", "b")]) for i in range(10)]
    train, val, test = split_records(records, SplitSpec(val=2, test=3, seed=4))
    assert (len(train), len(val), len(test)) == (5, 2, 3)
    ids = [r.image_id for part in (train, val, test) for r in part]
    assert sorted(ids) == sorted(r.image_id for r in records)
    for part in (train, val, test):
        positions = [int(r.image_id[1:]) for r in part]
        assert positions == sorted(positions)
    assert split_records(records, SplitSpec(val=2, test=3, seed=4)) == (train, val, test)

    small, _, _ = split_records(records, SplitSpec(train=4, val=2, test=3))
    assert len(small) == 4
    with pytest.raises(ConfigError):
        split_records(records, SplitSpec(train=8, val=2, test=3))


def test_alignment_file(tmp_path) -> None:
    rows = [AlignmentRow(item=0, triplet_index=1, fragment_index=4), AlignmentRow(item=3, triplet_index=0, fragment_index=0)]
    path = write_alignments(tmp_path / "alignments.csv", rows)
    assert path.read_text(encoding="utf-8").splitlines()[0] == "item,triplet_index,fragment_index"
    assert read_alignments(path) == rows

    path.write_text("a,b,c\n1,2,3\n", encoding="utf-8")
    with pytest.raises(InputFormatError):
        read_alignments(path)
