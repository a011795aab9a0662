import json

import numpy as np
import pytest

from bridgeseg.data import (DOMAINS, SPLITS, BenchmarkSpec, DatasetFormatError, EpochSampler,
                            LabelSecrecyError, benchmark_constants, generate_benchmark, read_dataset,
                            sample_batch, write_dataset)

SMALL = BenchmarkSpec(n_train=12, n_val=4, n_test=4, points_per_scene=16, seed=3)


@pytest.fixture(scope="module")
def small():
    return generate_benchmark(SMALL)


def test_layout_and_shapes(small):
    assert set(small.splits) == {(d, s) for d in DOMAINS for s in SPLITS}
    s, b, t = small[("S", "train")], small[("B", "train")], small[("T", "train")]
    assert s.m1.shape == (12, 16, SMALL.d1) and s.m2 is None
    assert t.m2.shape == (12, 16, SMALL.d2) and t.m1 is None
    assert b.m1.shape[:2] == b.m2.shape[:2] == (12, 16)
    assert len(small[("S", "val")]) == 4


def test_generation_is_deterministic(small):
    again = generate_benchmark(SMALL)
    for key, spl in small.splits.items():
        other = again[key]
        for attr in ("m1", "m2", "_labels"):
            a, b = getattr(spl, attr), getattr(other, attr)
            assert (a is None and b is None) or np.array_equal(a, b)


def test_different_seed_changes_data(small):
    other = generate_benchmark(BenchmarkSpec(n_train=12, n_val=4, n_test=4, points_per_scene=16, seed=4))
    assert not np.array_equal(small[("S", "train")].m1, other[("S", "train")].m1)


def test_bridge_views_share_latents():
    # with renderer noise off each view is a deterministic function of z:
    # recovering z from m1 must reproduce m2 and the shared class
    spec = BenchmarkSpec(n_train=4, n_val=0, n_test=0, points_per_scene=16, sigma_m1=0.0, sigma_m2=0.0)
    ds = generate_benchmark(spec)
    const = benchmark_constants(spec)
    b = ds[("B", "train")]
    lab = b.reveal_labels()
    for i in range(len(b)):
        # invert the modality-1 renderer (least squares) and re-render modality 2
        z = np.linalg.lstsq(const["A1"], (np.arctanh(np.clip(b.m1[i].astype(float), -0.999999, 0.999999))
                                          - const["b1"]).T, rcond=None)[0].T
        m2 = np.tanh(z @ const["A2"].T + const["b2"])
        np.testing.assert_allclose(m2, b.m2[i], atol=1e-3)  # f32 storage, arctanh near +-1
        # the class of the nearest shifted anchor is the stored label for both views
        shifted = const["anchors"] + np.asarray(spec.shift_B)
        nearest = np.argmin(((z[:, None, :] - shifted[None]) ** 2).sum(-1), axis=1)
        assert np.mean(nearest == lab[i]) > 0.9


def test_zero_shift_domains_share_law():
    zero = (0.0,) * 8
    spec = BenchmarkSpec(shift_S=zero, shift_B=zero, shift_T=zero, n_train=200, n_val=0, n_test=0, seed=1)
    ds = generate_benchmark(spec)
    s, b, t = (ds[(d, "train")] for d in DOMAINS)
    m_s, m_b = s.features("m1").reshape(-1, spec.d1), b.features("m1").reshape(-1, spec.d1)
    m_t, m_bt = t.features("m2").reshape(-1, spec.d2), b.features("m2").reshape(-1, spec.d2)
    # 12800 points per domain: mean differences of i.i.d. draws stay within a few standard errors
    se = 5 * m_s.std(0) / np.sqrt(len(m_s)) * np.sqrt(2)
    assert np.all(np.abs(m_s.mean(0) - m_b.mean(0)) < se)
    assert np.all(np.abs(m_t.mean(0) - m_bt.mean(0)) < 5 * m_t.std(0) / np.sqrt(len(m_t)) * np.sqrt(2))


def test_label_secrecy(small):
    assert small[("S", "train")].labels.shape == (12, 16)
    for dom in ("B", "T"):
        spl = small[(dom, "train")]
        with pytest.raises(LabelSecrecyError):
            spl.labels
        with pytest.raises(LabelSecrecyError):
            spl.scene(0).labels
        before = spl.reveal_count
        spl.reveal_labels()
        assert spl.reveal_count == before + 1


@pytest.mark.parametrize("bad", [dict(num_classes=1), dict(prior_S=(0.5, 0.5)),
                                 dict(shift_T=(1.0,)), dict(sigma_latent=-1.0)])
def test_invalid_spec(bad):
    with pytest.raises(ValueError):
        BenchmarkSpec(**bad)


def test_spec_dict_round_trip():
    assert BenchmarkSpec.from_dict(json.loads(json.dumps(SMALL.to_dict()))) == SMALL
    with pytest.raises(ValueError):
        BenchmarkSpec.from_dict({"colour": 1})


# --- files ----------------------------------------------------------------

def test_write_read_write_byte_identical(small, tmp_path):
    write_dataset(small, tmp_path / "a")
    back = read_dataset(tmp_path / "a")
    write_dataset(back, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(names) == 10 and "manifest.json" in names
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    for key, spl in small.splits.items():
        assert np.array_equal(spl.reveal_labels(), back[key].reveal_labels())
    assert back.spec == SMALL


def test_manifest_and_file_sizes(small, tmp_path):
    write_dataset(small, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["num_classes"] == SMALL.num_classes
    header = 4 + 2 + 1 + 4 + 4 + 2 + 2 + 2 + 1
    n, d1, d2 = SMALL.points_per_scene, SMALL.d1, SMALL.d2
    per_scene = {"S": n * d1 * 4 + n * 2, "B": n * (d1 + d2) * 4 + n * 2, "T": n * d2 * 4 + n * 2}
    for dom in DOMAINS:
        for split in SPLITS:
            size = (tmp_path / f"{dom}_{split}.bin").stat().st_size
            assert size == header + SMALL.n_scenes(split) * per_scene[dom]


def test_corrupted_magic_names_file(small, tmp_path):
    write_dataset(small, tmp_path)
    path = tmp_path / "T_val.bin"
    path.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(DatasetFormatError, match="T_val.bin"):
        read_dataset(tmp_path)


def test_truncated_record_reports_lengths(small, tmp_path):
    write_dataset(small, tmp_path)
    path = tmp_path / "B_test.bin"
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(DatasetFormatError, match=f"expected {len(raw)} bytes, got {len(raw) - 10}"):
        read_dataset(tmp_path)


def test_manifest_dim_mismatch(small, tmp_path):
    write_dataset(small, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["spec"]["d2"] = 5
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DatasetFormatError, match="disagree"):
        read_dataset(tmp_path)


# --- batching -------------------------------------------------------------

def test_epoch_covers_every_scene_once(small):
    sampler = EpochSampler(small[("S", "train")], 5, seed=0)
    seen = np.concatenate([sampler.next_batch().indices for _ in range(3)])
    assert sorted(seen.tolist()) == list(range(12))
    assert sampler.epoch == 1
    sampler.next_batch()
    assert sampler.epoch == 2


def test_same_seed_same_sequence(small):
    a, b = (EpochSampler(small[("B", "train")], 4, seed=9) for _ in range(2))
    for _ in range(7):
        assert np.array_equal(a.next_batch().indices, b.next_batch().indices)


def test_bridge_batches_carry_both_modalities(small):
    batch, sampler = sample_batch(small, "B", batch_size=3, rng_state=1)
    for _ in range(5):
        assert batch.x_m1.shape == (3 * 16, SMALL.d1)
        assert batch.x_m2.shape == (3 * 16, SMALL.d2)
        batch, _ = sample_batch(small, "B", rng_state=sampler)
    with pytest.raises(LabelSecrecyError):
        batch.labels


def test_batch_too_large(small):
    with pytest.raises(ValueError):
        EpochSampler(small[("S", "val")], 5, seed=0)
