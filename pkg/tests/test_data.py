import numpy as np
import pytest

from sparsefusion import data as sd


def small_spec(**over):
    base = dict(
        modalities=[sd.ModalitySpec("vis", n_tokens=12, dim_in=8, window=2, copies=2),
                    sd.ModalitySpec("aud", n_tokens=10, dim_in=6, window=2, copies=1)],
        num_classes=6,
        samples_per_class=8,
        components=[2, 3],
        assignment=[[0], [1]],
        noise=0.0,
        seed=3)
    base.update(over)
    return sd.SyntheticSpec(**base)


# -- oracle (independent of the model path) ----------------------------------

def oracle_features(ds, info, modalities=None, first_window_only=False):
    names = modalities or [m.name for m in ds.modalities]
    feats = []
    for s in ds.samples:
        parts = []
        for name in names:
            starts = info.offsets[s.sample_id][name]
            if first_window_only:
                starts = starts[:1]
            # first token of each signal window carries the class vector
            parts.append(np.concatenate(
                [s.data[name][st] for st in starts]).astype(np.float64))
        feats.append(np.concatenate(parts))
    return np.stack(feats), np.array([s.label for s in ds.samples])


def centroid_accuracy(feats, labels, num_classes):
    cents = np.stack([feats[labels == c].mean(axis=0) for c in range(num_classes)])
    d2 = ((feats[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
    pred = d2.argmin(axis=1)
    return float((pred == labels).mean())


def test_generation_deterministic():
    spec = small_spec(noise=0.4)
    a, ia = sd.generate_synthetic(spec, seed=11)
    b, ib = sd.generate_synthetic(spec, seed=11)
    for sa, sb in zip(a.samples, b.samples):
        assert sa.sample_id == sb.sample_id and sa.label == sb.label
        for name in sa.data:
            assert np.array_equal(sa.data[name], sb.data[name])
            assert sa.data[name].tobytes() == sb.data[name].tobytes()
        assert all(np.array_equal(ia.offsets[sa.sample_id][m],
                                  ib.offsets[sb.sample_id][m]) for m in sa.data)
    c, _ = sd.generate_synthetic(spec, seed=12)
    assert any(not np.array_equal(sa.data["vis"], sc.data["vis"])
               for sa, sc in zip(a.samples, c.samples))


def test_class_counts_balanced():
    ds, _ = sd.generate_synthetic(small_spec(), seed=0)
    labels = [s.label for s in ds.samples]
    for c in range(6):
        assert labels.count(c) == 8


def test_clean_single_copy_oracle_is_perfect():
    spec = small_spec(noise=0.0)
    spec.modalities[0].copies = 1
    spec.modalities[1].copies = 1
    ds, info = sd.generate_synthetic(spec, seed=5)
    feats, labels = oracle_features(ds, info)
    assert centroid_accuracy(feats, labels, 6) == 1.0


def test_complementarity_is_real():
    ds, info = sd.generate_synthetic(small_spec(), seed=7)
    full_feats, labels = oracle_features(ds, info)
    full = centroid_accuracy(full_feats, labels, 6)
    assert full == 1.0
    for name in ("vis", "aud"):
        part_feats, _ = oracle_features(ds, info, modalities=[name])
        part = centroid_accuracy(part_feats, labels, 6)
        assert part < full


def test_redundancy_is_real():
    ds, info = sd.generate_synthetic(small_spec(), seed=9)
    all_feats, labels = oracle_features(ds, info)
    one_feats, _ = oracle_features(ds, info, first_window_only=True)
    assert centroid_accuracy(all_feats, labels, 6) == \
        centroid_accuracy(one_feats, labels, 6) == 1.0


def test_component_values_identify_classes():
    with pytest.raises(sd.DatasetError):
        small_spec(components=[2, 2], num_classes=6)  # only 2 joint values over C=6
    spec = small_spec()
    assert spec.class_values(4) == (0, 1)


def test_assignment_validation():
    with pytest.raises(sd.DatasetError):
        small_spec(assignment=[[0], []])
    with pytest.raises(sd.DatasetError):
        small_spec(assignment=[[0], [5]])


def test_window_validation():
    with pytest.raises(sd.DatasetError):
        sd.ModalitySpec("x", n_tokens=4, dim_in=4, window=5)
    with pytest.raises(sd.DatasetError):
        sd.ModalitySpec("x", n_tokens=4, dim_in=4, window=2, copies=3)


def test_spec_dict_round_trip():
    spec = small_spec(noise=0.25)
    again = sd.SyntheticSpec.from_dict(spec.to_dict())
    assert again == spec


def test_save_load_round_trip(tmp_path):
    ds, _ = sd.generate_synthetic(small_spec(noise=0.2), seed=1)
    sd.split_dataset(ds, (0.5, 0.25, 0.25), seed=2)
    sd.save_dataset(ds, tmp_path)
    back = sd.load_dataset(tmp_path)
    assert back.num_classes == ds.num_classes
    assert back.splits == ds.splits
    for orig in ds.samples:
        got = back.by_id(orig.sample_id)
        assert got.label == orig.label
        for name in orig.data:
            assert got.data[name].tobytes() == orig.data[name].tobytes()


def test_truncated_token_file_names_offender(tmp_path):
    ds, _ = sd.generate_synthetic(small_spec(), seed=1)
    sd.save_dataset(ds, tmp_path)
    victim = tmp_path / "s00003.vis.f32"
    victim.write_bytes(victim.read_bytes()[:-8])
    with pytest.raises(sd.DatasetError, match="s00003.vis.f32"):
        sd.load_dataset(tmp_path)


def test_unknown_modality_in_manifest(tmp_path):
    import json
    ds, _ = sd.generate_synthetic(small_spec(), seed=1)
    sd.save_dataset(ds, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["samples"][0]["files"]["ghost"] = "nothing.f32"
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(sd.DatasetError, match="ghost"):
        sd.load_dataset(tmp_path)


def test_missing_file_errors(tmp_path):
    ds, _ = sd.generate_synthetic(small_spec(), seed=1)
    sd.save_dataset(ds, tmp_path)
    (tmp_path / "s00000.aud.f32").unlink()
    with pytest.raises(sd.DatasetError, match="s00000.aud.f32"):
        sd.load_dataset(tmp_path)


def test_split_sizes_and_determinism():
    spec = small_spec(num_classes=2, samples_per_class=50, components=[2, 3])
    ds, _ = sd.generate_synthetic(spec, seed=0)
    splits = sd.split_dataset(ds, (0.8, 0.2, 0.0), seed=4)
    assert len(splits["train"]) == 80
    assert len(splits["val"]) == 20
    assert len(splits["test"]) == 0
    again, _ = sd.generate_synthetic(spec, seed=0)
    assert sd.split_dataset(again, (0.8, 0.2, 0.0), seed=4) == splits


def test_split_stratification():
    ds, _ = sd.generate_synthetic(small_spec(samples_per_class=10), seed=0)
    splits = sd.split_dataset(ds, (0.6, 0.2, 0.2), seed=5)
    for name, frac in zip(("train", "val", "test"), (0.6, 0.2, 0.2)):
        labels = [ds.by_id(i).label for i in splits[name]]
        for c in range(6):
            assert abs(labels.count(c) - frac * 10) <= 1


def test_split_bad_fractions_and_empty():
    ds, _ = sd.generate_synthetic(small_spec(), seed=0)
    with pytest.raises(sd.DatasetError):
        sd.split_dataset(ds, (0.5, 0.2, 0.2), seed=0)
    tiny_spec = small_spec(samples_per_class=1, num_classes=2, components=[2, 2])
    tiny, _ = sd.generate_synthetic(tiny_spec, seed=0)
    with pytest.raises(sd.DatasetError):
        sd.split_dataset(tiny, (0.999, 0.001, 0.0), seed=0)


def test_label_noise_flips_requested_fraction():
    ds, _ = sd.generate_synthetic(small_spec(samples_per_class=20), seed=0)
    sd.split_dataset(ds, (1.0, 0.0, 0.0), seed=1)
    before = {s.sample_id: s.label for s in ds.samples}
    flipped = sd.apply_label_noise(ds, 0.1, seed=2)
    assert len(flipped) == round(0.1 * 120)
    for sid in flipped:
        assert ds.by_id(sid).label != before[sid]
    untouched = set(before) - set(flipped)
    assert all(ds.by_id(sid).label == before[sid] for sid in untouched)
