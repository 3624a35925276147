import copy

import pytest

from owseg.errors import RatioUnreachableError
from owseg.owsplit import (
    class_image_frequency,
    rebuild_splits,
    select_unseen_by_ratio,
    stats_tsv,
    validate_split,
)


def make_doc(image_ids, anns, categories):
    return {
        "images": [{"id": i, "width": 8, "height": 8} for i in image_ids],
        "annotations": [
            {"id": n + 1, "image_id": img, "category_id": cid} for n, (img, cid) in enumerate(anns)
        ],
        "categories": [{"id": c, "name": f"c{c}"} for c in categories],
    }


@pytest.fixture()
def hundred_image_doc():
    """100 train images; class 9 appears in exactly 2, class 8 in 5, class 7
    in 10; classes 1..3 are common (known)."""
    anns = []
    for img in range(100):
        anns.append((img, 1 + img % 3))
    for img in (10, 11):
        anns.append((img, 9))
    for img in (20, 21, 22, 23, 24):
        anns.append((img, 8))
    for img in range(30, 40):
        anns.append((img, 7))
    return make_doc(range(100), anns, [1, 2, 3, 7, 8, 9])


def test_class_image_frequency_counts_images_not_instances():
    doc = make_doc([0, 1], [(0, 5), (0, 5), (1, 5), (0, 6)], [5, 6])
    freq = class_image_frequency(doc)
    assert freq == {5: 2, 6: 1}


def test_select_by_ratio_picks_single_rare_class(hundred_image_doc):
    # class 9 removes exactly 2 of 100 images
    chosen = select_unseen_by_ratio(hundred_image_doc, [1, 2, 3], 0.02)
    assert chosen == [9]


def test_select_by_ratio_orders_by_rarity(hundred_image_doc):
    chosen = select_unseen_by_ratio(hundred_image_doc, [1, 2, 3], 0.07)
    assert chosen == [9, 8]


def test_select_by_ratio_closest_below_on_overshoot(hundred_image_doc):
    # prefixes remove 2%, 7%, 17%; target 8% is nearer 7% than 17%
    chosen = select_unseen_by_ratio(hundred_image_doc, [1, 2, 3], 0.08)
    assert chosen == [9, 8]


def test_select_by_ratio_never_empty(hundred_image_doc):
    chosen = select_unseen_by_ratio(hundred_image_doc, [1, 2, 3], 0.001)
    assert chosen == [9]


def test_select_by_ratio_monotone_in_ratio(hundred_image_doc):
    sizes = [
        len(select_unseen_by_ratio(hundred_image_doc, [1, 2, 3], rho))
        for rho in (0.01, 0.05, 0.10, 0.17)
    ]
    assert sizes == sorted(sizes)


def test_select_by_ratio_unreachable(hundred_image_doc):
    with pytest.raises(RatioUnreachableError):
        select_unseen_by_ratio(hundred_image_doc, [1, 2, 3], 0.9)


def test_select_by_ratio_excludes_known(hundred_image_doc):
    chosen = select_unseen_by_ratio(hundred_image_doc, [9, 1, 2, 3], 0.04)
    assert 9 not in chosen
    assert chosen == [8]


def test_rebuild_empty_unseen_is_identity():
    train = make_doc([0, 1], [(0, 1), (1, 2)], [1, 2])
    test = make_doc([5], [(5, 1)], [1, 2])
    train2, test2, plan = rebuild_splits(train, test, [1, 2], [])
    assert [i["id"] for i in train2["images"]] == [0, 1]
    assert len(train2["annotations"]) == 2
    assert [i["id"] for i in test2["images"]] == [5]
    assert plan.removed_train_images == []


def test_rebuild_moves_unseen_bearing_image():
    train = make_doc([0, 1, 2], [(0, 1), (1, 9), (1, 1), (2, 2)], [1, 2, 9])
    test = make_doc([5], [(5, 1)], [1, 2, 9])
    train2, test2, plan = rebuild_splits(train, test, [1, 2], [9])
    assert len(train2["images"]) == 2
    assert len(test2["images"]) == 2
    assert plan.removed_train_images == [1]
    # moved image keeps its full annotation set, with fresh ids
    moved = [a for a in test2["annotations"] if a["image_id"] == 1]
    assert sorted(a["category_id"] for a in moved) == [1, 9]
    ids = [a["id"] for a in test2["annotations"]]
    assert len(set(ids)) == len(ids)


def test_rebuild_strips_seen_annotations():
    train = make_doc([0], [(0, 1), (0, 4)], [1, 4, 9])
    test = make_doc([5], [], [1, 4, 9])
    train2, _, _ = rebuild_splits(train, test, [1], [9])
    assert [a["category_id"] for a in train2["annotations"]] == [1]


def test_rebuild_stats_match_hand_count(small_dataset, tmp_path):
    from owseg.coco import load_coco
    from owseg.shapeworld import export_coco

    _, tax, train, test = small_dataset
    export_coco(train, tax, tmp_path / "train.json")
    export_coco(test, tax, tmp_path / "test.json")
    train_doc = load_coco(tmp_path / "train.json")
    test_doc = load_coco(tmp_path / "test.json")

    unseen = sorted(tax.unseen)[:2]
    known = sorted(tax.known)
    train2, test2, plan = rebuild_splits(train_doc, test_doc, known, unseen)

    # brute-force recount from the raw documents
    bad_images = {a["image_id"] for a in train_doc["annotations"] if a["category_id"] in unseen}
    assert sorted(bad_images) == plan.removed_train_images
    assert len(train2["images"]) == len(train_doc["images"]) - len(bad_images)
    assert len(test2["images"]) == len(test_doc["images"]) + len(bad_images)

    kept = [a for a in train_doc["annotations"] if a["image_id"] not in bad_images]
    want_known_ins = sum(1 for a in kept if a["category_id"] in tax.known)
    assert plan.stats.train_instances["known"] == want_known_ins
    want_test_unseen = sum(1 for a in test_doc["annotations"] if a["category_id"] in unseen) + sum(
        1 for a in train_doc["annotations"] if a["image_id"] in bad_images and a["category_id"] in unseen
    )
    assert plan.stats.test_instances["unseen"] == want_test_unseen
    rows = stats_tsv(plan.stats).strip().splitlines()
    assert rows[0].startswith("split\t")
    assert len(rows) == 6


def test_rebuild_idempotent_and_conserves_images(small_dataset, tmp_path):
    from owseg.coco import load_coco
    from owseg.shapeworld import export_coco

    _, tax, train, test = small_dataset
    export_coco(train, tax, tmp_path / "train.json")
    export_coco(test, tax, tmp_path / "test.json")
    train_doc = load_coco(tmp_path / "train.json")
    test_doc = load_coco(tmp_path / "test.json")
    unseen = sorted(tax.unseen)
    known = sorted(tax.known)

    train1, test1, _ = rebuild_splits(train_doc, test_doc, known, unseen)
    before = sorted([i["id"] for i in train_doc["images"]] + [i["id"] for i in test_doc["images"]])
    after = sorted([i["id"] for i in train1["images"]] + [i["id"] for i in test1["images"]])
    assert before == after

    train2, test2, _ = rebuild_splits(copy.deepcopy(train1), copy.deepcopy(test1), known, unseen)
    assert train2["images"] == train1["images"]
    assert train2["annotations"] == train1["annotations"]
    assert test2["images"] == test1["images"]
    assert test2["annotations"] == test1["annotations"]


def test_validate_split_clean_and_corrupted():
    train = make_doc([0], [(0, 1)], [1, 4, 9])
    assert validate_split(train, [1], [9]) == []
    corrupted = make_doc([0], [(0, 1), (0, 9)], [1, 4, 9])
    violations = validate_split(corrupted, [1], [9])
    assert len(violations) == 1 and "unseen" in violations[0]
    annotated_seen = make_doc([0], [(0, 4)], [1, 4, 9])
    violations = validate_split(annotated_seen, [1], [9])
    assert len(violations) == 1 and "seen" in violations[0]


def test_validate_split_empty_train():
    train = make_doc([], [], [1, 9])
    assert validate_split(train, [1], [9]) == []


def test_rebuild_rejects_overlapping_sets():
    train = make_doc([0], [(0, 1)], [1, 9])
    test = make_doc([], [], [1, 9])
    with pytest.raises(ValueError):
        rebuild_splits(train, test, [1, 9], [9])
