import hashlib

import numpy as np
import pytest
import yaml

from mpnas.data import (BatchStream, DataError, DomainFamilySpec, SPLITS, batches, generate,
                        generator_patterns, load_directory, load_family, write_directory)

SMALL = dict(split_sizes={"train": 64, "validation": 32, "test": 32})


def test_default_family_shape():
    spec = DomainFamilySpec()
    ds = generate(spec)
    assert [d.class_count for d in ds] == [4, 10, 4, 6]
    assert [d.name for d in ds] == ["d0", "d1", "d2", "d3"]
    for d in ds:
        for s in SPLITS:
            x, y = d.split(s)
            assert x.shape == (spec.split_sizes[s], 1, 16, 16) and x.dtype == np.float32
            assert y.min() >= 0 and y.max() < d.class_count
            assert x.min() >= 0.0 and x.max() <= 1.0


def test_generation_is_a_pure_function_of_the_spec():
    a = generate(DomainFamilySpec(seed=3, **SMALL))
    b = generate(DomainFamilySpec(seed=3, **SMALL))
    for da, db in zip(a, b):
        for s in SPLITS:
            assert np.array_equal(da.split(s)[0], db.split(s)[0])
            assert np.array_equal(da.split(s)[1], db.split(s)[1])
    c = generate(DomainFamilySpec(seed=4, **SMALL))
    assert not np.array_equal(a[0].split("train")[0], c[0].split("train")[0])


def test_splits_are_disjoint():
    for d in generate(DomainFamilySpec(**SMALL)):
        seen = {}
        for s in SPLITS:
            for img in d.split(s)[0]:
                h = hashlib.sha256(img.tobytes()).hexdigest()
                assert seen.setdefault(h, s) == s


def test_full_correlation_gives_the_same_generator():
    spec = DomainFamilySpec(class_counts=(3, 3), correlations={"0-1": 1.0}, noise=0.3)
    pats = generator_patterns(spec)
    assert pats[0]["ids"] == pats[1]["ids"]
    assert all(np.array_equal(a, b) for a, b in zip(pats[0]["prototypes"], pats[1]["prototypes"]))
    d0, d1 = generate(spec)
    x0, y0 = d0.split("train")
    x1, y1 = d1.split("train")
    assert not np.array_equal(x0, x1)
    for k in range(3):
        assert np.abs(x0[y0 == k].mean(0) - x1[y1 == k].mean(0)).max() < 0.12


def test_zero_correlation_shares_no_patterns():
    spec = DomainFamilySpec(class_counts=(4, 4), correlations={})
    pats = generator_patterns(spec)
    assert not set(pats[0]["ids"]) & set(pats[1]["ids"])
    assert not pats[1]["distractors"]


def test_partial_correlation_shares_a_fraction():
    spec = DomainFamilySpec()
    pats = generator_patterns(spec)
    assert len(set(pats[0]["ids"]) & set(pats[1]["ids"])) == 4
    assert len(set(pats[0]["ids"]) & set(pats[3]["ids"])) == 2
    assert not set(pats[0]["ids"]) & set(pats[2]["ids"])


def test_negative_correlation_adds_distractors():
    pats = generator_patterns(DomainFamilySpec(class_counts=(4, 4), correlations={"0-1": -0.5}))
    assert len(pats[1]["distractors"]) == 2
    assert not set(pats[0]["ids"]) & set(pats[1]["ids"])


def test_linear_classifier_separates_a_noise_free_domain():
    spec = DomainFamilySpec(class_counts=(2,), correlations={}, noise=0.0)
    (d,) = generate(spec)
    x, y = d.split("train")
    xt, yt = d.split("test")

    def feats(a):
        return np.hstack([a.reshape(len(a), -1), np.ones((len(a), 1))])

    # least-squares linear classifier on +/-1 targets
    w, *_ = np.linalg.lstsq(feats(x), 2.0 * y - 1, rcond=None)
    acc = np.mean((feats(xt) @ w > 0) == (yt == 1))
    assert acc > 0.9


@pytest.mark.parametrize("kw,field", [
    (dict(correlations={"0-1": 1.5}), "correlations"),
    (dict(class_counts=(4, 1)), "class_counts"),
    (dict(noise=(0.1, 0.2)), "noise"),
    (dict(correlations={"a-b": 0.5}), "correlations"),
    (dict(style_spread=-1.0), "style_spread"),
])
def test_invalid_family_specs_name_the_field(kw, field):
    with pytest.raises(DataError, match=field):
        DomainFamilySpec(**kw).validate()


def test_family_dict_round_trip():
    spec = DomainFamilySpec(noise=(0.1, 0.2, 0.3, 0.4), seed=9)
    assert DomainFamilySpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(DataError, match="unknown"):
        DomainFamilySpec.from_dict({"colour": 1})


# --- files -------------------------------------------------------------------------------

def test_write_then_load_reproduces_tensors(tmp_path):
    ds = generate(DomainFamilySpec(**SMALL))
    write_directory(ds, tmp_path)
    loaded = load_family(tmp_path)
    for a, b in zip(ds, loaded):
        assert (a.name, a.class_count) == (b.name, b.class_count)
        for s in SPLITS:
            assert np.array_equal(a.split(s)[0], b.split(s)[0])
            assert np.array_equal(a.split(s)[1], b.split(s)[1])


def test_seeded_load_is_a_deterministic_permutation(tmp_path):
    ds = generate(DomainFamilySpec(class_counts=(3,), correlations={}, **SMALL))
    write_directory(ds, tmp_path)
    a = load_directory(tmp_path / "d0", seed=1)
    b = load_directory(tmp_path / "d0", seed=1)
    assert np.array_equal(a.split("train")[0], b.split("train")[0])
    assert sorted(a.split("train")[1].tolist()) == sorted(ds[0].split("train")[1].tolist())


def test_empty_split_directory_loads_as_empty(tmp_path):
    ds = generate(DomainFamilySpec(class_counts=(2,), correlations={},
                                   split_sizes={"train": 8, "validation": 0, "test": 4}))
    write_directory(ds, tmp_path)
    d = load_directory(tmp_path / "d0")
    assert d.size("validation") == 0


def test_missing_manifest_is_an_error(tmp_path):
    with pytest.raises(DataError, match="manifest"):
        load_directory(tmp_path)


def test_resolution_mismatch_names_the_file(tmp_path):
    ds = generate(DomainFamilySpec(class_counts=(2,), correlations={}, **SMALL))
    write_directory(ds, tmp_path)
    mpath = tmp_path / "d0" / "manifest.yaml"
    m = yaml.safe_load(mpath.read_text())
    m["resolution"] = 8
    mpath.write_text(yaml.safe_dump(m))
    with pytest.raises(DataError, match=r"\.f32"):
        load_directory(tmp_path / "d0")


def test_unknown_label_directory_is_an_error(tmp_path):
    ds = generate(DomainFamilySpec(class_counts=(2,), correlations={}, **SMALL))
    write_directory(ds, tmp_path)
    (tmp_path / "d0" / "train" / "7").mkdir()
    with pytest.raises(DataError, match="label"):
        load_directory(tmp_path / "d0")


# --- batching ------------------------------------------------------------------------------

def test_batch_size_equal_to_split_gives_one_batch():
    (d,) = generate(DomainFamilySpec(class_counts=(2,), correlations={}, **SMALL))
    assert len(list(batches(d, "validation", 32, np.random.default_rng(0)))) == 1


def test_partial_batch_is_dropped():
    (d,) = generate(DomainFamilySpec(class_counts=(2,), correlations={}, **SMALL))
    out = list(batches(d, "train", 30, np.random.default_rng(0)))
    assert [len(y) for _, y in out] == [30, 30]


def test_equal_seeds_give_equal_batch_sequences():
    (d,) = generate(DomainFamilySpec(class_counts=(2,), correlations={}, **SMALL))
    a = BatchStream(d, "train", 16, np.random.default_rng(5))
    b = BatchStream(d, "train", 16, np.random.default_rng(5))
    for _ in range(10):
        (xa, ya), (xb, yb) = a.next(), b.next()
        assert np.array_equal(xa, xb) and np.array_equal(ya, yb)
    assert a.epochs == 2


def test_epoch_label_frequencies_match_dataset():
    (d,) = generate(DomainFamilySpec(class_counts=(5,), correlations={}, **SMALL))
    ys = np.concatenate([y for _, y in batches(d, "train", 8, np.random.default_rng(2))])
    assert np.array_equal(np.bincount(ys, minlength=5), np.bincount(d.split("train")[1], minlength=5))


def test_batching_errors():
    (d,) = generate(DomainFamilySpec(class_counts=(2,), correlations={}, **SMALL))
    with pytest.raises(ValueError):
        next(batches(d, "train", 0, np.random.default_rng(0)))
    with pytest.raises(DataError):
        next(batches(d, "holdout", 4, np.random.default_rng(0)))
    with pytest.raises(DataError):
        BatchStream(d, "test", 64, np.random.default_rng(0))
