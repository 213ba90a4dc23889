"""Synthetic corpus pipeline: phantoms, degradation, augmentation, storage."""

import dataclasses
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from ctlformer.data import (
    AUGMENT_CHOICES,
    KINDS,
    NoiseSpec,
    PhantomSpec,
    SliceImage,
    augment,
    build_corpus,
    export_pgm,
    generate_phantom,
    inject_noise,
    load_corpus,
    load_slice,
    patient_name,
    save_slice,
    split_patients,
)
from ctlformer.errors import ContractError, IntegrityError, ShapeError
from ctlformer.tensor import Tensor

# frozen by searching seeds 0..199: the first whose augment draw is the
# identity transform, and the first whose draw is not
IDENTITY_AUGMENT_SEED = 23
ROTATING_AUGMENT_SEED = 0  # draws (k=3, flip=False)

# frozen by searching seeds 0..599: three near-vertical streaks that neither
# touch each other nor leave the frame
STREAK_SEED = 2


def const_slice(value=128.0, size=64, pid="p0", index=0, kind="clean"):
    return SliceImage(Tensor(np.full((1, size, size), value, np.float32)),
                      pid, index, kind)


def random_slice(seed, size=32, pid="p0", index=0, kind="clean"):
    rng = np.random.default_rng(seed)
    px = rng.uniform(0.0, 255.0, size=(1, size, size)).astype(np.float32)
    return SliceImage(Tensor(px), pid, index, kind)


# ---------------------------------------------------------------------------
# value types


def test_slice_image_accepts_valid():
    s = const_slice()
    assert s.kind == "clean" and s.pixels.shape == (1, 64, 64)


def test_slice_image_rejects_bad_kind():
    with pytest.raises(ContractError, match="kind"):
        const_slice(kind="raw")


def test_slice_image_rejects_bad_shape():
    with pytest.raises(ShapeError):
        SliceImage(Tensor(np.zeros((64, 64), np.float32)), "p", 0, "clean")
    with pytest.raises(ShapeError):
        SliceImage(Tensor(np.zeros((2, 8, 8), np.float32)), "p", 0, "clean")


def test_slice_image_rejects_nonfinite_and_out_of_range():
    bad = np.full((1, 8, 8), np.nan, np.float32)
    with pytest.raises(ContractError, match="finite"):
        SliceImage(Tensor(bad), "p", 0, "clean")
    with pytest.raises(ContractError, match=r"\[0, 255\]"):
        const_slice(value=300.0)
    with pytest.raises(ContractError, match=r"\[0, 255\]"):
        const_slice(value=-1.0)


def test_slice_image_rejects_negative_index():
    with pytest.raises(ContractError, match="slice_index"):
        const_slice(index=-1)


@pytest.mark.parametrize("kwargs", [
    dict(size=4),
    dict(ellipse_count=(5, 2)),
    dict(ellipse_count=(-1, 2)),
    dict(intensity=(200.0, 100.0)),
    dict(intensity=(-5.0, 100.0)),
    dict(intensity=(40.0, 300.0)),
    dict(background=-1.0),
    dict(background=256.0),
])
def test_phantom_spec_rejects_bad_values(kwargs):
    with pytest.raises(ContractError):
        PhantomSpec(**kwargs)


@pytest.mark.parametrize("kwargs", [
    dict(gaussian_sigma=-1.0),
    dict(streak_count=-1),
    dict(streak_amplitude=-0.5),
    dict(streak_angle_range=(90.0, 10.0)),
])
def test_noise_spec_rejects_bad_values(kwargs):
    with pytest.raises(ContractError):
        NoiseSpec(**kwargs)


def test_patient_names():
    assert patient_name(0) == "L500-syn"
    assert patient_name(9) == "L509-syn"
    assert [patient_name(i) for i in range(3)] == ["L500-syn", "L501-syn", "L502-syn"]


# ---------------------------------------------------------------------------
# phantom generation


def test_phantom_shape_kind_and_dtype():
    s = generate_phantom(PhantomSpec(size=48, seed=3))
    assert s.pixels.shape == (1, 48, 48)
    assert s.pixels.data.dtype == np.float32
    assert s.kind == "clean"


def test_phantom_range_sweep_1000_random_specs():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        size = int(rng.integers(8, 49))
        lo = float(rng.uniform(0.0, 200.0))
        hi = float(rng.uniform(lo, 255.0))
        bg = float(rng.uniform(0.0, 255.0))
        clo = int(rng.integers(0, 4))
        chi = int(rng.integers(clo, 7))
        spec = PhantomSpec(size=size, ellipse_count=(clo, chi),
                           intensity=(lo, hi), background=bg,
                           seed=int(rng.integers(0, 2**31)))
        d = generate_phantom(spec).pixels.data
        assert d.min() >= 0.0 and d.max() <= 255.0
        # compositing is a convex blend of background and ellipse values
        bound_lo = min(bg, lo) - 1e-3
        bound_hi = max(bg, hi) + 1e-3
        assert d.min() >= bound_lo and d.max() <= bound_hi


def test_phantom_same_seed_bit_identical():
    a = generate_phantom(PhantomSpec(seed=7)).pixels.data
    b = generate_phantom(PhantomSpec(seed=7)).pixels.data
    assert np.array_equal(a, b)


def test_phantom_different_seeds_differ():
    a = generate_phantom(PhantomSpec(seed=7)).pixels.data
    b = generate_phantom(PhantomSpec(seed=8)).pixels.data
    assert not np.array_equal(a, b)


def test_phantom_zero_ellipses_is_flat_background():
    spec = PhantomSpec(size=32, ellipse_count=(0, 0), background=55.0, seed=1)
    d = generate_phantom(spec).pixels.data
    assert np.array_equal(d, np.full((1, 32, 32), 55.0, np.float32))


def test_phantom_contains_interior_and_background():
    # with bright ellipses on a dark background both levels must appear
    spec = PhantomSpec(size=128, ellipse_count=(3, 3),
                       intensity=(200.0, 220.0), background=20.0, seed=4)
    d = generate_phantom(spec).pixels.data
    assert d.min() <= 21.0       # some untouched background remains
    assert d.max() >= 150.0      # some ellipse interior present


def test_phantom_rim_is_gradual():
    # the rim ramp must produce intermediate values, not a hard step
    spec = PhantomSpec(size=64, ellipse_count=(1, 1),
                       intensity=(220.0, 220.0), background=20.0, seed=2)
    d = generate_phantom(spec).pixels.data
    mid = (d > 60.0) & (d < 180.0)
    assert mid.sum() > 0


# ---------------------------------------------------------------------------
# degradation


def test_inject_noise_requires_clean_kind():
    noisy = const_slice(kind="noisy")
    with pytest.raises(ContractError, match="clean"):
        inject_noise(noisy, NoiseSpec())


def test_inject_noise_zero_noise_is_identity():
    clean = random_slice(5)
    out = inject_noise(clean, NoiseSpec(gaussian_sigma=0.0, streak_count=0, seed=9))
    assert np.array_equal(out.pixels.data, clean.pixels.data)
    assert out.kind == "noisy"
    assert out.patient_id == clean.patient_id
    assert out.slice_index == clean.slice_index


def test_inject_noise_same_seed_bit_identical():
    clean = random_slice(6)
    a = inject_noise(clean, NoiseSpec(seed=11)).pixels.data
    b = inject_noise(clean, NoiseSpec(seed=11)).pixels.data
    assert np.array_equal(a, b)


def test_inject_noise_different_seeds_differ():
    clean = random_slice(6)
    a = inject_noise(clean, NoiseSpec(seed=11)).pixels.data
    b = inject_noise(clean, NoiseSpec(seed=12)).pixels.data
    assert not np.array_equal(a, b)


def test_inject_noise_clips_to_display_range():
    clean = const_slice(value=250.0, size=32)
    out = inject_noise(clean, NoiseSpec(gaussian_sigma=40.0, streak_count=0,
                                        seed=3)).pixels.data
    assert out.max() <= 255.0 and out.min() >= 0.0
    assert (out == 255.0).any()  # sigma 40 at level 250 must saturate somewhere


def test_gaussian_moments_over_20_seeds():
    # mean within 0.5 of 0 and std within 0.5 of the target sigma, with
    # clipping inactive (level 128, sigma 10 keeps values far from 0/255)
    clean = const_slice(value=128.0, size=256)
    for seed in range(20):
        spec = NoiseSpec(gaussian_sigma=10.0, streak_count=0, seed=seed)
        delta = inject_noise(clean, spec).pixels.data - clean.pixels.data
        assert abs(float(delta.mean())) < 0.5
        assert abs(float(delta.std()) - 10.0) < 0.5


def test_streak_count_via_same_seed_differencing():
    # same seed, identical gaussian substream: the difference between the
    # 3-streak and 0-streak renders isolates the streak field exactly
    clean = const_slice(value=128.0, size=64)
    kw = dict(gaussian_sigma=10.0, streak_amplitude=20.0,
              streak_angle_range=(80.0, 100.0), seed=STREAK_SEED)
    with_streaks = inject_noise(clean, NoiseSpec(streak_count=3, **kw)).pixels.data[0]
    without = inject_noise(clean, NoiseSpec(streak_count=0, **kw)).pixels.data[0]
    # no clipping occurred, so the difference is the pure streak field
    for render in (with_streaks, without):
        assert render.min() > 0.0 and render.max() < 255.0
    diff = with_streaks - without
    mask = np.abs(diff) > 1e-6
    n_components = ndimage.label(mask, structure=np.ones((3, 3)))[1]
    assert n_components == 3
    # non-overlapping one-pixel lines: every marked pixel is exactly +-amp
    assert np.allclose(np.abs(diff[mask]), 20.0, atol=1e-4)
    # near-vertical lines cross the full frame: one pixel per line per row
    assert (mask.sum(axis=1) == 3).all()


def test_streaks_change_every_row_or_column():
    # a 0-degree (horizontal) streak touches every column
    clean = const_slice(value=128.0, size=48)
    kw = dict(gaussian_sigma=0.0, streak_amplitude=15.0,
              streak_angle_range=(0.0, 0.0), seed=0)
    out = inject_noise(clean, NoiseSpec(streak_count=1, **kw)).pixels.data[0]
    diff = out - 128.0
    assert (np.abs(diff) > 1e-6).sum(axis=0).min() >= 1


def test_gaussian_component_independent_of_streak_count():
    # substream split: adding streaks must not perturb the gaussian draw
    clean = const_slice(value=128.0, size=32)
    a = inject_noise(clean, NoiseSpec(gaussian_sigma=5.0, streak_count=0,
                                      streak_amplitude=0.0, seed=42)).pixels.data
    b = inject_noise(clean, NoiseSpec(gaussian_sigma=5.0, streak_count=4,
                                      streak_amplitude=0.0, seed=42)).pixels.data
    assert np.array_equal(a, b)  # zero amplitude streaks leave pixels alone


# ---------------------------------------------------------------------------
# augmentation


def make_pair(seed=0, size=16):
    clean = random_slice(seed, size=size)
    noisy = inject_noise(clean, NoiseSpec(gaussian_sigma=3.0, streak_count=0,
                                          seed=seed))
    return clean, noisy


def test_augment_choice_table():
    assert len(AUGMENT_CHOICES) == 8
    assert len(set(AUGMENT_CHOICES)) == 8
    assert AUGMENT_CHOICES[0] == (0, False)


def test_augment_identity_draw_is_bit_exact():
    pair = make_pair(1)
    out_c, out_n = augment(pair, IDENTITY_AUGMENT_SEED)
    assert np.array_equal(out_c.pixels.data, pair[0].pixels.data)
    assert np.array_equal(out_n.pixels.data, pair[1].pixels.data)


def test_augment_preserves_pixel_multiset():
    pair = make_pair(2)
    for seed in range(8):
        out_c, out_n = augment(pair, seed)
        assert np.array_equal(np.sort(out_c.pixels.data, axis=None),
                              np.sort(pair[0].pixels.data, axis=None))
        assert np.array_equal(np.sort(out_n.pixels.data, axis=None),
                              np.sort(pair[1].pixels.data, axis=None))


def test_augment_applies_one_of_the_eight_isometries_to_both():
    pair = make_pair(3)
    for seed in range(10):
        out_c, out_n = augment(pair, seed)
        matches = []
        for k, flip in AUGMENT_CHOICES:
            cand = np.rot90(pair[0].pixels.data, k, axes=(1, 2))
            if flip:
                cand = cand[:, :, ::-1]
            if np.array_equal(out_c.pixels.data, cand):
                matches.append((k, flip))
        assert len(matches) == 1, f"seed {seed}: ambiguous or missing transform"
        k, flip = matches[0]
        cand = np.rot90(pair[1].pixels.data, k, axes=(1, 2))
        if flip:
            cand = cand[:, :, ::-1]
        assert np.array_equal(out_n.pixels.data, cand)


def test_augment_commutes_with_subtraction():
    # transform(noisy) - transform(clean) == transform(noisy - clean)
    pair = make_pair(4)
    raw_delta = pair[1].pixels.data - pair[0].pixels.data
    out_c, out_n = augment(pair, ROTATING_AUGMENT_SEED)
    aug_delta = out_n.pixels.data - out_c.pixels.data
    k, flip = 3, False  # the frozen draw for ROTATING_AUGMENT_SEED
    expected = np.rot90(raw_delta, k, axes=(1, 2))
    if flip:
        expected = expected[:, :, ::-1]
    assert np.array_equal(aug_delta, expected)
    assert not np.array_equal(out_c.pixels.data, pair[0].pixels.data)


def test_augment_same_seed_deterministic():
    pair = make_pair(5)
    a = augment(pair, 123)
    b = augment(pair, 123)
    assert np.array_equal(a[0].pixels.data, b[0].pixels.data)
    assert np.array_equal(a[1].pixels.data, b[1].pixels.data)


def test_augment_rejects_mismatched_shapes():
    clean = random_slice(1, size=16)
    noisy = random_slice(1, size=32, kind="noisy")
    with pytest.raises(ShapeError, match="pair shapes differ"):
        augment((clean, noisy), 0)


def test_augment_preserves_metadata():
    clean = random_slice(7, pid="L503-syn", index=12)
    noisy = inject_noise(clean, NoiseSpec(seed=7))
    out_c, out_n = augment((clean, noisy), 3)
    assert out_c.patient_id == "L503-syn" and out_c.slice_index == 12
    assert out_n.kind == "noisy" and out_c.kind == "clean"


# ---------------------------------------------------------------------------
# patient split


def ten_patient_corpus(slices_per=5):
    out = []
    for p in range(10):
        for s in range(slices_per):
            out.append(const_slice(value=float(p), size=8,
                                   pid=patient_name(p), index=s))
    return out


def test_split_holds_out_one_patient():
    corpus = ten_patient_corpus()
    train, test = split_patients(corpus, "L506-syn")
    assert len(train) == 45 and len(test) == 5
    assert all(s.patient_id == "L506-syn" for s in test)
    assert all(s.patient_id != "L506-syn" for s in train)


def test_split_is_a_partition():
    corpus = ten_patient_corpus(slices_per=3)
    train, test = split_patients(corpus, "L500-syn")
    assert len(train) + len(test) == len(corpus)
    ids = {(s.patient_id, s.slice_index) for s in corpus}
    back = {(s.patient_id, s.slice_index) for s in train + test}
    assert ids == back


def test_split_rejects_unknown_patient():
    corpus = ten_patient_corpus()
    with pytest.raises(ContractError, match="L999-syn"):
        split_patients(corpus, "L999-syn")
    # the error names the patients that do exist
    with pytest.raises(ContractError, match="L500-syn"):
        split_patients(corpus, "nope")


def test_split_single_patient_warns_on_empty_train():
    corpus = [const_slice(pid="L500-syn", index=i, size=8) for i in range(4)]
    with pytest.warns(UserWarning, match="empty"):
        train, test = split_patients(corpus, "L500-syn")
    assert train == [] and len(test) == 4


# ---------------------------------------------------------------------------
# slice container format


def test_slice_roundtrip_bit_exact(tmp_path):
    s = random_slice(9, size=24, pid="L507-syn", index=13, kind="noisy")
    path = tmp_path / "s.ctsl"
    save_slice(s, path)
    back = load_slice(path)
    assert np.array_equal(back.pixels.data, s.pixels.data)
    assert back.pixels.data.dtype == np.float32
    assert back.patient_id == "L507-syn"
    assert back.slice_index == 13
    assert back.kind == "noisy"


@settings(max_examples=20)
@given(h=st.integers(1, 8), w=st.integers(1, 8),
       index=st.integers(0, 10_000),
       kind=st.sampled_from(KINDS),
       pid=st.text(alphabet=st.characters(codec="ascii",
                                          categories=("L", "N", "P")),
                   min_size=1, max_size=32),
       seed=st.integers(0, 2**31 - 1))
def test_slice_roundtrip_property(tmp_path_factory, h, w, index, kind, pid, seed):
    rng = np.random.default_rng(seed)
    px = rng.uniform(0.0, 255.0, size=(1, h, w)).astype(np.float32)
    s = SliceImage(Tensor(px), pid, index, kind)
    path = tmp_path_factory.mktemp("rt") / "s.ctsl"
    save_slice(s, path)
    back = load_slice(path)
    assert np.array_equal(back.pixels.data, px)
    assert (back.patient_id, back.slice_index, back.kind) == (pid, index, kind)


@pytest.mark.parametrize("cut,field", [
    (2, "magic"),
    (6, "version"),
    (10, "height"),
    (14, "width"),
    (16, "kind"),
    (20, "patient id length"),
    (22, "patient id"),
    (26, "slice index"),
    (40, "pixel data"),
])
def test_slice_truncation_names_field(tmp_path, cut, field):
    s = random_slice(1, size=4, pid="ab")
    path = tmp_path / "s.ctsl"
    save_slice(s, path)
    blob = path.read_bytes()
    assert cut < len(blob)
    path.write_bytes(blob[:cut])
    with pytest.raises(IntegrityError, match=f"truncated in {field}"):
        load_slice(path)


def test_slice_rejects_bad_magic(tmp_path):
    s = random_slice(1, size=4)
    path = tmp_path / "s.ctsl"
    save_slice(s, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"JUNK"
    path.write_bytes(bytes(blob))
    with pytest.raises(IntegrityError, match="magic"):
        load_slice(path)


def test_slice_rejects_checkpoint_file(tmp_path):
    # a model checkpoint starts with a different magic; the loader must
    # refuse it instead of misreading the header
    from ctlformer.model import ModelConfig, init, save_checkpoint
    from ctlformer.tokenizer import TokenizerConfig
    from ctlformer.attention import AttentionConfig
    cfg = ModelConfig(
        tokenizer=TokenizerConfig(stem_channels=4, embed_dim=8, detok_channels=4),
        attention=AttentionConfig(dim=8, heads=2, mlp_ratio=2),
        depth=1, tile_size=16)
    path = tmp_path / "m.ckpt"
    save_checkpoint(init(cfg, seed=0), cfg, path)
    with pytest.raises(IntegrityError, match="magic"):
        load_slice(path)


def test_slice_rejects_unsupported_version(tmp_path):
    s = random_slice(1, size=4)
    path = tmp_path / "s.ctsl"
    save_slice(s, path)
    blob = bytearray(path.read_bytes())
    blob[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(blob))
    with pytest.raises(IntegrityError, match="version 99"):
        load_slice(path)


def test_slice_rejects_unknown_kind_code(tmp_path):
    s = random_slice(1, size=4)
    path = tmp_path / "s.ctsl"
    save_slice(s, path)
    blob = bytearray(path.read_bytes())
    blob[16] = 7
    path.write_bytes(bytes(blob))
    with pytest.raises(IntegrityError, match="kind code 7"):
        load_slice(path)


def test_slice_rejects_trailing_bytes(tmp_path):
    s = random_slice(1, size=4)
    path = tmp_path / "s.ctsl"
    save_slice(s, path)
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(IntegrityError, match="trailing"):
        load_slice(path)


# ---------------------------------------------------------------------------
# PGM export


def test_pgm_constant_slice_oracle(tmp_path):
    # 128 display units * 257 = 32896 in 16-bit, i.e. 0x8080
    path = tmp_path / "x.pgm"
    export_pgm(const_slice(value=128.0, size=4), path)
    raw = path.read_bytes()
    header, pixels = raw.split(b"65535\n", 1)
    assert header == b"P5\n4 4\n"
    vals = np.frombuffer(pixels, dtype=">u2")
    assert vals.shape == (16,)
    assert (vals == 32896).all()


def test_pgm_extremes(tmp_path):
    px = np.zeros((1, 1, 2), np.float32)
    px[0, 0, 1] = 255.0
    s = SliceImage(Tensor(px), "p", 0, "clean")
    path = tmp_path / "x.pgm"
    export_pgm(s, path)
    vals = np.frombuffer(path.read_bytes().split(b"65535\n", 1)[1], dtype=">u2")
    assert vals[0] == 0 and vals[1] == 65535


def test_pgm_truncates_fractions(tmp_path):
    # 1.9 display units -> 488.3 -> truncated to 488
    px = np.full((1, 1, 1), 1.9, np.float32)
    s = SliceImage(Tensor(px), "p", 0, "clean")
    path = tmp_path / "x.pgm"
    export_pgm(s, path)
    vals = np.frombuffer(path.read_bytes().split(b"65535\n", 1)[1], dtype=">u2")
    assert vals[0] == int(1.9 * 257.0)


# ---------------------------------------------------------------------------
# corpus build / load


def test_build_corpus_layout_and_pairs(tmp_path):
    pairs = build_corpus(tmp_path, patients=2, slices_per_patient=3, size=32,
                         master_seed=4)
    assert len(pairs) == 6
    assert [(c.patient_id, c.slice_index) for c, _ in pairs] == [
        ("L500-syn", 0), ("L500-syn", 1), ("L500-syn", 2),
        ("L501-syn", 0), ("L501-syn", 1), ("L501-syn", 2)]
    for kind in ("clean", "noisy"):
        for pid in ("L500-syn", "L501-syn"):
            for idx in range(3):
                assert (tmp_path / kind / pid / f"{idx:04d}.ctsl").is_file()
    for clean, noisy in pairs:
        assert clean.kind == "clean" and noisy.kind == "noisy"
        assert clean.patient_id == noisy.patient_id
        assert clean.slice_index == noisy.slice_index
        assert not np.array_equal(clean.pixels.data, noisy.pixels.data)


def test_corpus_roundtrip_bit_exact(tmp_path):
    built = build_corpus(tmp_path, patients=2, slices_per_patient=2, size=24,
                         master_seed=8)
    loaded = load_corpus(tmp_path)
    assert len(loaded) == len(built)
    for (bc, bn), (lc, ln) in zip(built, loaded):
        assert np.array_equal(bc.pixels.data, lc.pixels.data)
        assert np.array_equal(bn.pixels.data, ln.pixels.data)
        assert (bc.patient_id, bc.slice_index) == (lc.patient_id, lc.slice_index)
        assert ln.kind == "noisy" and lc.kind == "clean"


def test_build_corpus_deterministic(tmp_path):
    build_corpus(tmp_path / "a", patients=2, slices_per_patient=2, size=16,
                 master_seed=5)
    build_corpus(tmp_path / "b", patients=2, slices_per_patient=2, size=16,
                 master_seed=5)
    for rel in ("clean/L501-syn/0001.ctsl", "noisy/L500-syn/0000.ctsl"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_build_corpus_master_seed_changes_content(tmp_path):
    a = build_corpus(tmp_path / "a", patients=1, slices_per_patient=1, size=16,
                     master_seed=5)
    b = build_corpus(tmp_path / "b", patients=1, slices_per_patient=1, size=16,
                     master_seed=6)
    assert not np.array_equal(a[0][0].pixels.data, b[0][0].pixels.data)


def test_build_corpus_slices_are_distinct(tmp_path):
    pairs = build_corpus(tmp_path, patients=2, slices_per_patient=2, size=16,
                         master_seed=0)
    cleans = [c.pixels.data for c, _ in pairs]
    for i in range(len(cleans)):
        for j in range(i + 1, len(cleans)):
            assert not np.array_equal(cleans[i], cleans[j])


def test_build_corpus_rejects_empty(tmp_path):
    with pytest.raises(ContractError):
        build_corpus(tmp_path, patients=0, slices_per_patient=5)
    with pytest.raises(ContractError):
        build_corpus(tmp_path, patients=1, slices_per_patient=0)


def test_load_corpus_missing_twin(tmp_path):
    build_corpus(tmp_path, patients=1, slices_per_patient=2, size=16,
                 master_seed=1)
    (tmp_path / "noisy" / "L500-syn" / "0001.ctsl").unlink()
    with pytest.raises(ContractError, match="missing noisy twin"):
        load_corpus(tmp_path)


def test_load_corpus_rejects_missing_subtrees(tmp_path):
    with pytest.raises(ContractError, match="clean"):
        load_corpus(tmp_path)


def test_load_corpus_rejects_empty_tree(tmp_path):
    (tmp_path / "clean").mkdir()
    (tmp_path / "noisy").mkdir()
    with pytest.raises(ContractError, match="no slice pairs"):
        load_corpus(tmp_path)


def test_load_corpus_ordering(tmp_path):
    build_corpus(tmp_path, patients=3, slices_per_patient=2, size=16,
                 master_seed=2)
    loaded = load_corpus(tmp_path)
    keys = [(c.patient_id, c.slice_index) for c, _ in loaded]
    assert keys == sorted(keys)


def test_dataclass_replace_keeps_validation():
    s = const_slice()
    with pytest.raises(ContractError):
        dataclasses.replace(s, kind="bogus")
