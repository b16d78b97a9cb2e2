import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from icas import synthdata
from icas.content_cycling import (
    ContentEmbeddingList,
    build_schedule,
    embedding_for_site,
    extract_content_embeddings,
)


def test_three_embeddings_over_six_sites():
    assert build_schedule(3, 6).assignment == (0, 1, 2, 0, 1, 2)


def test_four_embeddings_over_six_sites():
    assert build_schedule(4, 6).assignment == (0, 1, 2, 3, 0, 1)


def test_single_embedding_fills_every_site():
    assert set(build_schedule(1, 5).assignment) == {0}


def test_more_embeddings_than_sites_rejected():
    with pytest.raises(ValueError, match="cannot be spread"):
        build_schedule(5, 4)


@pytest.mark.parametrize("k, sites", [(0, 3), (2, 0), (-1, 4)])
def test_non_positive_counts_rejected(k, sites):
    with pytest.raises(ValueError):
        build_schedule(k, sites)


@given(st.integers(1, 12), st.integers(1, 24))
def test_every_embedding_used_and_counts_balanced(k, sites):
    if k > sites:
        return
    counts = np.bincount(build_schedule(k, sites).assignment, minlength=k)
    assert counts.min() >= 1
    assert counts.max() - counts.min() <= 1


def test_agrees_with_counter_reference():
    for sites in range(1, 17):
        for k in range(1, min(8, sites) + 1):
            assert list(build_schedule(k, sites).assignment) == oracles.cyclic_assignment(k, sites)


def test_embedding_for_site_follows_schedule():
    embs = ContentEmbeddingList.of([np.full(3, float(i)) for i in range(3)])
    sched = build_schedule(3, 7)
    picked = [embedding_for_site(sched, embs, i)[0] for i in range(7)]
    assert picked == [0, 1, 2, 0, 1, 2, 0]
    with pytest.raises(IndexError):
        embedding_for_site(sched, embs, 7)


def test_schedule_and_list_must_agree():
    embs = ContentEmbeddingList.of([np.zeros(3), np.ones(3)])
    with pytest.raises(ValueError, match="3 embeddings"):
        embedding_for_site(build_schedule(3, 4), embs, 0)


def test_list_validation():
    with pytest.raises(ValueError):
        ContentEmbeddingList.of([])
    with pytest.raises(ValueError, match="width"):
        ContentEmbeddingList.of([np.zeros(3), np.zeros(4)])


def test_segmentation_mode_encodes_each_mask():
    image = synthdata.gen_content(3, 3)
    embs = extract_content_embeddings(image, image.subject_masks, lambda im, m: synthdata.encode_content(im, m, 8))
    assert len(embs) == 3
    assert embs.tags == ("subject:0", "subject:1", "subject:2")
    for j, m in enumerate(image.subject_masks):
        np.testing.assert_array_equal(embs[j], synthdata.encode_content(image, m, 8))


def test_augmentation_mode_yields_three_views():
    image = synthdata.gen_content(4, 2)
    enc = lambda im, m: synthdata.encode_content(im, m, 8)  # noqa: E731
    embs = extract_content_embeddings(image, image.subject_masks, enc, "augmentation", np.random.default_rng(0))
    again = extract_content_embeddings(image, image.subject_masks, enc, "augmentation", np.random.default_rng(0))
    assert len(embs) == 3 and embs.width == 8
    assert all(np.array_equal(a, b) for a, b in zip(embs.items, again.items))


def test_extraction_needs_masks():
    image = synthdata.gen_content(0, 1)
    with pytest.raises(ValueError):
        extract_content_embeddings(image, [], synthdata.encode_content)
    with pytest.raises(ValueError, match="mode"):
        extract_content_embeddings(image, image.subject_masks, synthdata.encode_content, mode="crop")
