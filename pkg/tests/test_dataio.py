"""File format round-trips, validation, fuzzing and the synthetic generator."""

import io
import zlib

import numpy as np
import pytest

from defa.dataio import (
    FormatError,
    SyntheticSpec,
    build_spaces,
    format_manifest,
    generate_synthetic,
    load_dataset,
    pack_block,
    parse_manifest,
    read_embeddings,
    read_feasibility,
    save_synthetic,
    unpack_block,
    write_embeddings,
)
from defa.nn import make_rng
from defa.space import count_frequencies


# ---------------------------------------------------------------------------
# embedding container


def test_roundtrip_bitwise(tmp_path):
    rng = make_rng(0)
    x = rng.normal(size=(10, 8)).astype(np.float32)
    ids = [f"img{i}" for i in range(10)]
    p1, p2 = tmp_path / "a.defa", tmp_path / "b.defa"
    write_embeddings(p1, ids, x)
    got_ids, got = read_embeddings(p1)
    assert got_ids == ids
    assert np.array_equal(got, x.astype(np.float64))
    write_embeddings(p2, got_ids, got)
    assert p1.read_bytes() == p2.read_bytes()


def test_empty_file_is_16_bytes_without_checksum(tmp_path):
    p = tmp_path / "empty.defa"
    write_embeddings(p, [], np.zeros((0, 7), dtype=np.float32), checksum=False)
    assert p.stat().st_size == 16
    ids, x = read_embeddings(p)
    assert ids == [] and x.shape == (0, 7)


def test_checksummed_file_is_16_plus_4_bytes_when_empty(tmp_path):
    p = tmp_path / "empty.defa"
    write_embeddings(p, [], np.zeros((0, 3), dtype=np.float32))
    assert p.stat().st_size == 20


def test_bare_file_accepted(tmp_path):
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    p = tmp_path / "bare.defa"
    write_embeddings(p, ["a", "b"], x, checksum=False)
    ids, got = read_embeddings(p)
    assert ids == ["a", "b"]
    assert np.array_equal(got, x)


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "x.defa"
    write_embeddings(p, ["a"], np.zeros((1, 2), dtype=np.float32))
    raw = bytearray(p.read_bytes())
    raw[0:4] = b"XEFA"
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        read_embeddings(p)


def test_duplicate_ids_rejected():
    with pytest.raises(FormatError, match="duplicate"):
        pack_block(["a", "a"], np.zeros((2, 2)))


def test_newline_in_id_rejected():
    with pytest.raises(FormatError, match="newline"):
        pack_block(["a\nb"], np.zeros((1, 2)))


def test_nonfinite_payload_rejected():
    block = pack_block(["a"], np.array([[np.inf, 0.0]]), version=2)
    with pytest.raises(FormatError, match="non-finite"):
        unpack_block(io.BytesIO(block))


def test_truncations_always_rejected(tmp_path):
    x = make_rng(1).normal(size=(6, 5)).astype(np.float32)
    ids = [f"id{i}" for i in range(6)]
    p = tmp_path / "t.defa"
    write_embeddings(p, ids, x)
    raw = p.read_bytes()
    for cut in range(len(raw)):
        if cut == len(raw) - 4:
            # only the integrity tail is gone; the content reads back intact
            got_ids, got = unpack_block(io.BytesIO(raw[:cut]))
            assert got_ids == ids and np.array_equal(got, x.astype(np.float64))
            continue
        with pytest.raises(FormatError):
            unpack_block(io.BytesIO(raw[:cut]))


def test_corruptions_rejected_random():
    x = make_rng(2).normal(size=(4, 3)).astype(np.float32)
    raw = pack_block([f"id{i}" for i in range(4)], x)
    rng = make_rng(3)
    rejected = 0
    for _ in range(300):
        pos = int(rng.integers(0, len(raw)))
        delta = int(rng.integers(1, 256))
        bad = bytearray(raw)
        bad[pos] = (bad[pos] + delta) % 256
        try:
            ids, m = unpack_block(io.BytesIO(bytes(bad)))
        except FormatError:
            rejected += 1
        else:  # silent misread
            raise AssertionError(f"corruption at byte {pos} went undetected")
    assert rejected == 300


def test_checksum_verified_when_present(tmp_path):
    x = np.ones((2, 2), dtype=np.float32)
    raw = bytearray(pack_block(["a", "b"], x))
    raw[-1] ^= 0xFF
    with pytest.raises(FormatError, match="checksum"):
        unpack_block(io.BytesIO(bytes(raw)))


def test_version2_float64_roundtrip():
    x = make_rng(4).normal(size=(3, 4))
    block = pack_block(["p|3,4"], x.reshape(1, -1), version=2)
    ids, m = unpack_block(io.BytesIO(block), expect_version=2, expect_checksum=True)
    assert ids == ["p|3,4"]
    assert np.array_equal(m.reshape(3, 4), x)  # float64 path is lossless


# ---------------------------------------------------------------------------
# manifest


def manifest_text():
    return (
        "attrs:\tnew\told\n"
        "objs:\tcastle\tbridge\n"
        "unseen-val:\told\tcastle\n"
        "unseen-test:\tnew\tbridge\n"
        "i0\tnew\tcastle\ttrain\n"
        "i1\told\tbridge\ttrain\n"
        "i2\tnew\tcastle\tval\n"
        "i3\told\tcastle\tval\n"
        "i4\told\tbridge\ttest\n"
        "i5\tnew\tbridge\ttest\n")


def test_manifest_roundtrip():
    md = parse_manifest(manifest_text())
    assert md.attrs == ("new", "old")
    assert md.unseen_val == {(1, 0)}
    assert format_manifest(md) == manifest_text()


def test_manifest_spaces():
    spaces = build_spaces(parse_manifest(manifest_text()))
    assert spaces["train"].seen == {(0, 0), (1, 1)}
    assert spaces["train"].unseen == frozenset()
    assert spaces["val"].seen == {(0, 0)}
    assert spaces["val"].unseen == {(1, 0)}
    assert spaces["test"].seen == {(1, 1)}
    assert spaces["test"].unseen == {(0, 1)}


@pytest.mark.parametrize("mutation,msg", [
    (lambda t: t.replace("i0\tnew", "i0\tancient"), "unknown attribute"),
    (lambda t: t.replace("i4\told\tbridge\ttest", "i4\told\tbridge\tother"),
     "unknown split"),
    (lambda t: t.replace("i5", "i4"), "duplicate image id"),
    (lambda t: t.replace("unseen-test:\tnew\tbridge\n", ""),
     "neither train-seen nor declared"),
    (lambda t: t + "unseen-test:\tnew\tcastle\n", "also occur in training"),
    (lambda t: t.replace("attrs:", "primitives:"), "must start with"),
    (lambda t: t + "badline\twith\ttoo\tmany\tfields\there\n", "malformed"),
])
def test_manifest_validation_errors(mutation, msg):
    with pytest.raises(FormatError, match=msg):
        parse_manifest(mutation(manifest_text()))


def test_load_dataset_missing_id(tmp_path):
    md_path = tmp_path / "m.tsv"
    md_path.write_text(manifest_text())
    emb = tmp_path / "e.defa"
    write_embeddings(emb, [f"i{k}" for k in range(5)], np.zeros((5, 4), np.float32))
    with pytest.raises(FormatError, match="i5.*missing"):
        load_dataset(md_path, emb)


def test_ut_zappos_shaped_candidate_count():
    # 16 attrs x 12 objs, 83 train pairs, 18 seen + 18 unseen test pairs
    rng = make_rng(6)
    attrs = [f"a{i}" for i in range(16)]
    objs = [f"o{i}" for i in range(12)]
    pairs = [(a, o) for a in range(16) for o in range(12)]
    chosen = rng.choice(len(pairs), size=83 + 18, replace=False)
    train_pairs = [pairs[i] for i in chosen[:83]]
    unseen_test = [pairs[i] for i in chosen[83:]]
    lines = ["attrs:\t" + "\t".join(attrs), "objs:\t" + "\t".join(objs)]
    lines += [f"unseen-test:\t{attrs[a]}\t{objs[o]}" for a, o in unseen_test]
    k = 0
    for a, o in train_pairs:
        lines.append(f"t{k}\t{attrs[a]}\t{objs[o]}\ttrain")
        k += 1
    for a, o in train_pairs[:18] + unseen_test:
        lines.append(f"x{k}\t{attrs[a]}\t{objs[o]}\ttest")
        k += 1
    spaces = build_spaces(parse_manifest("\n".join(lines) + "\n"))
    assert len(spaces["test"].test_closed) == 36


# ---------------------------------------------------------------------------
# feasibility


def test_feasibility_roundtrip(tmp_path):
    spaces = build_spaces(parse_manifest(manifest_text()))
    sp = spaces["test"]
    path = tmp_path / "feas.tsv"
    lines = [f"{sp.attributes[a]}\t{sp.objects[o]}\t{0.1 * (a + o)}"
             for a in range(2) for o in range(2)]
    path.write_text("\n".join(lines) + "\n")
    grid = read_feasibility(path, sp)
    assert grid.shape == (2, 2)
    assert grid[1, 1] == pytest.approx(0.2)


def test_feasibility_missing_pair_named(tmp_path):
    spaces = build_spaces(parse_manifest(manifest_text()))
    sp = spaces["test"]
    path = tmp_path / "feas.tsv"
    path.write_text("new\tcastle\t0.5\nnew\tbridge\t0.5\nold\tcastle\t0.5\n")
    with pytest.raises(FormatError, match="'old'.*'bridge'"):
        read_feasibility(path, sp)


def test_feasibility_unknown_primitive(tmp_path):
    spaces = build_spaces(parse_manifest(manifest_text()))
    path = tmp_path / "feas.tsv"
    path.write_text("ancient\tcastle\t0.5\n")
    with pytest.raises(FormatError, match="unknown attribute"):
        read_feasibility(path, spaces["test"])


# ---------------------------------------------------------------------------
# synthetic generator


def test_synthetic_deterministic(tmp_path):
    spec = SyntheticSpec(n_attrs=8, n_objs=10, seen_fraction=0.6, seed=7,
                         samples_per_pair=3, eval_per_pair=2)
    r1 = generate_synthetic(spec)
    r2 = generate_synthetic(spec)
    assert np.array_equal(r1.features, r2.features)
    assert r1.manifest_text() == r2.manifest_text()
    p1e, p1m = tmp_path / "1.defa", tmp_path / "1.tsv"
    p2e, p2m = tmp_path / "2.defa", tmp_path / "2.tsv"
    save_synthetic(r1, p1e, p1m)
    save_synthetic(r2, p2e, p2m)
    assert p1e.read_bytes() == p2e.read_bytes()
    assert p1m.read_bytes() == p2m.read_bytes()


def test_synthetic_noiseless_features_identical_per_pair():
    spec = SyntheticSpec(n_attrs=3, n_objs=3, seen_fraction=0.7, noise=0.0,
                         interaction=0.0, samples_per_pair=4, eval_per_pair=1, seed=1)
    res = generate_synthetic(spec)
    by_pair = {}
    for (sid, a, o, split), feat in zip(res.manifest.samples, res.features):
        if split != "train":
            continue
        by_pair.setdefault((a, o), []).append(feat)
    for feats in by_pair.values():
        for f in feats[1:]:
            assert np.array_equal(f, feats[0])


def test_synthetic_noiseless_prototype_decoding_exact():
    spec = SyntheticSpec(n_attrs=5, n_objs=4, seen_fraction=0.6, noise=0.0,
                         samples_per_pair=2, eval_per_pair=1, seed=3)
    res = generate_synthetic(spec)
    db = spec.d_backbone
    for (a, o), pre in res.preimages.items():
        da = np.linalg.norm(res.attr_protos - pre[:db], axis=1)
        do = np.linalg.norm(res.obj_protos - pre[db:], axis=1)
        assert int(np.argmin(da)) == a
        assert int(np.argmin(do)) == o


def test_synthetic_power_law_counts():
    spec = SyntheticSpec(n_attrs=8, n_objs=10, seen_fraction=0.6,
                         samples_per_pair=42, tail_exponent=1.5, seed=9)
    res = generate_synthetic(spec)
    counts = sorted(res.train_pair_counts.values())
    assert len(counts) == 48
    assert sum(counts) == pytest.approx(2016, rel=0.1)
    assert counts[-1] / counts[0] > 10


def test_synthetic_split_structure():
    spec = SyntheticSpec(n_attrs=4, n_objs=5, seen_fraction=0.5,
                         samples_per_pair=2, eval_per_pair=2, seed=4)
    res = generate_synthetic(spec)
    md = res.manifest
    assert len(md.unseen_val) + len(md.unseen_test) == 10
    assert abs(len(md.unseen_val) - len(md.unseen_test)) <= 1
    spaces = build_spaces(md)
    # proper subset of the Cartesian set on every split space
    for sp in spaces.values():
        assert len(sp.test_closed) < sp.n_comps


def test_synthetic_compositional_premise():
    # same-composition features must be more alike than cross-composition ones
    spec = SyntheticSpec(n_attrs=6, n_objs=6, seen_fraction=0.6, noise=0.1,
                         samples_per_pair=6, eval_per_pair=2, seed=5)
    res = generate_synthetic(spec)
    feats = res.features.astype(np.float64)
    norm = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    labels = np.array([(a, o) for (_, a, o, _) in res.manifest.samples])
    cos = norm @ norm.T
    same = (labels[:, None, 0] == labels[None, :, 0]) & \
           (labels[:, None, 1] == labels[None, :, 1])
    np.fill_diagonal(same, False)
    off = ~np.eye(len(feats), dtype=bool)
    assert cos[same].mean() > cos[off & ~same].mean() + 0.2


def test_synthetic_rejects_bad_fractions():
    with pytest.raises(ValueError, match="seen_fraction"):
        SyntheticSpec(n_attrs=4, n_objs=4, seen_fraction=0.0)
    with pytest.raises(ValueError, match="0 seen pairs"):
        generate_synthetic(SyntheticSpec(n_attrs=10, n_objs=10,
                                         seen_fraction=0.004))


def test_dataset_loading_end_to_end(tmp_path):
    spec = SyntheticSpec(n_attrs=4, n_objs=4, seen_fraction=0.6,
                         samples_per_pair=3, eval_per_pair=2, seed=11)
    res = generate_synthetic(spec)
    save_synthetic(res, tmp_path / "e.defa", tmp_path / "m.tsv")
    ds = load_dataset(tmp_path / "m.tsv", tmp_path / "e.defa")
    assert ds.d_backbone == spec.d_backbone
    n_total = sum(len(v) for v in ds.samples.values())
    assert n_total == len(res.ids)
    freq = count_frequencies(ds.samples["train"], ds.spaces["train"])
    assert freq.n_samples == len(ds.samples["train"])
