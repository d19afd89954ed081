import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pathgt import cohort as ch


def small_cohort(seed=3, n=40, g=12):
    rng = np.random.default_rng(seed)
    return ch.CohortMatrix(
        patient_ids=[f"P{i:03d}" for i in range(n)],
        gene_ids=[f"G{j:02d}" for j in range(g)],
        mut=(rng.random((n, g)) < 0.3).astype(np.float64),
        cnv=rng.standard_normal((n, g)) * 2.0 + 0.5,
        labels=(rng.random(n) < 0.4).astype(np.int64),
    )


# ---------------------------------------------------------------- norm stats

def test_norm_zero_mean_unit_like_std_on_training_rows():
    c = small_cohort()
    stats = ch.fit_norm_stats(c, np.arange(c.n_patients), source_fold=1)
    out = ch.apply_norm(c, stats)
    np.testing.assert_allclose(out.cnv.mean(axis=0), 0.0, atol=1e-6)
    sigma = c.cnv.std(axis=0, ddof=0)
    expected = sigma / (sigma + stats.eps)
    np.testing.assert_allclose(out.cnv.std(axis=0, ddof=0), expected, atol=1e-4)
    np.testing.assert_array_equal(out.mut, c.mut)  # mutations untouched


def test_norm_stats_fit_on_training_rows_only():
    c = small_cohort()
    train = np.arange(0, 20)
    stats = ch.fit_norm_stats(c, train, source_fold=3)
    np.testing.assert_allclose(stats.mean, c.cnv[train].mean(axis=0))
    assert stats.source_fold == 3


def test_norm_constant_gene_maps_to_zero():
    c = small_cohort(g=3)
    c.cnv[:] = 7.5
    stats = ch.fit_norm_stats(c, np.arange(c.n_patients), source_fold=2)
    out = ch.apply_norm(c, stats)
    np.testing.assert_array_equal(out.cnv, 0.0)
    assert stats.source_fold == 2


def test_norm_rejects_vocabulary_mismatch():
    c = small_cohort()
    stats = ch.fit_norm_stats(c, np.arange(c.n_patients), source_fold=1)
    other = small_cohort()
    other.gene_ids = list(reversed(other.gene_ids))
    with pytest.raises(ch.DataError):
        ch.apply_norm(other, stats)
    with pytest.raises(ch.DataError):
        ch.apply_norm_rows(stats, c.cnv[:, :5])


def test_norm_stats_use_population_std():
    c = small_cohort(n=2, g=1)
    c.cnv[:, 0] = [1.0, 3.0]
    stats = ch.fit_norm_stats(c, [0, 1], source_fold=1)
    assert stats.std[0] == pytest.approx(1.0)  # ddof=0, not sqrt(2)


# ---------------------------------------------------------------- filtering

def test_filter_genes_drops_rare_and_is_idempotent():
    c = small_cohort()
    c.mut[:, 0] = 0.0
    c.cnv[:, 0] = 0.0  # gene 0 never altered
    c.mut[:, 1] = 0.0
    c.cnv[:, 1] = 0.3  # |cnv| below threshold: not altered
    out = ch.filter_genes(c, min_freq=0.01, cnv_alter_threshold=0.5)
    assert "G00" not in out.gene_ids and "G01" not in out.gene_ids
    again = ch.filter_genes(out, min_freq=0.01, cnv_alter_threshold=0.5)
    assert again.gene_ids == out.gene_ids
    np.testing.assert_array_equal(again.mut, out.mut)


def test_filter_threshold_is_strict():
    c = small_cohort(n=10, g=2)
    c.mut[:] = 0.0
    c.cnv[:, 0] = 0.5   # exactly at threshold: not altered
    c.cnv[:, 1] = 0.51
    out = ch.filter_genes(c, min_freq=0.01, cnv_alter_threshold=0.5)
    assert out.gene_ids == ["G01"]


def test_filter_all_genes_removed_errors():
    c = small_cohort(n=5, g=3)
    c.mut[:] = 0.0
    c.cnv[:] = 0.0
    with pytest.raises(ch.DataError):
        ch.filter_genes(c)


# ---------------------------------------------------------------- folds

def test_make_folds_partition_and_stratification():
    labels = np.asarray([0] * 80 + [1] * 20)
    folds = ch.make_folds(labels, n_folds=5, base_seed=42)
    assert len(folds) == 5
    all_test = np.concatenate([f.test_idx for f in folds])
    assert sorted(all_test.tolist()) == list(range(100))  # test folds partition cohort
    for f in folds:
        parts = np.concatenate([f.train_idx, f.val_idx, f.test_idx])
        assert sorted(parts.tolist()) == list(range(100))
        assert not (set(f.train_idx) & set(f.val_idx))
        assert not (set(f.train_idx) & set(f.test_idx))
        assert not (set(f.val_idx) & set(f.test_idx))
        # 80/20 with 5 folds: test gets 16+4, val rounds to 6+2 of the rest
        assert labels[f.test_idx].sum() == 4 and f.test_idx.size == 20
        assert labels[f.val_idx].sum() == 2 and f.val_idx.size == 8
        assert f.train_idx.size == 72
        assert f.seed == 42 + f.fold_index


def test_make_folds_class_balance_within_one():
    rng = np.random.default_rng(11)
    labels = (rng.random(237) < 0.37).astype(np.int64)
    folds = ch.make_folds(labels, n_folds=5, base_seed=9)
    for c in (0, 1):
        counts = [int((labels[f.test_idx] == c).sum()) for f in folds]
        assert max(counts) - min(counts) <= 1


def test_make_folds_deterministic_and_seed_sensitive():
    labels = np.asarray([0] * 40 + [1] * 25)
    a = ch.make_folds(labels, base_seed=7)
    b = ch.make_folds(labels, base_seed=7)
    c = ch.make_folds(labels, base_seed=8)
    for fa, fb in zip(a, b):
        np.testing.assert_array_equal(fa.train_idx, fb.train_idx)
        np.testing.assert_array_equal(fa.val_idx, fb.val_idx)
        np.testing.assert_array_equal(fa.test_idx, fb.test_idx)
    assert any(not np.array_equal(fa.test_idx, fc.test_idx) for fa, fc in zip(a, c))


def test_make_folds_rejects_tiny_class():
    labels = np.asarray([0] * 50 + [1] * 3)
    with pytest.raises(ch.DataError):
        ch.make_folds(labels, n_folds=5, base_seed=1)


def test_fold_manifest_roundtrip(tmp_path):
    labels = np.asarray([0] * 40 + [1] * 20)
    folds = ch.make_folds(labels, base_seed=5)
    path = tmp_path / "folds.json"
    ch.save_fold_manifest(path, folds)
    loaded = ch.load_fold_manifest(path)
    for f, g in zip(folds, loaded):
        assert f.fold_index == g.fold_index and f.base_seed == g.base_seed
        np.testing.assert_array_equal(f.train_idx, g.train_idx)
        np.testing.assert_array_equal(f.val_idx, g.val_idx)
        np.testing.assert_array_equal(f.test_idx, g.test_idx)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(60, 200), st.floats(0.2, 0.8))
def test_make_folds_property_partition(seed, n, frac):
    rng = np.random.default_rng(seed)
    labels = (rng.random(n) < frac).astype(np.int64)
    if min((labels == 0).sum(), (labels == 1).sum()) < 12:
        return
    for f in ch.make_folds(labels, n_folds=5, base_seed=seed):
        parts = np.concatenate([f.train_idx, f.val_idx, f.test_idx])
        assert sorted(parts.tolist()) == list(range(n))
        assert set(np.unique(labels[f.val_idx])) == {0, 1}


# ---------------------------------------------------------------- synthesis

def test_synth_shapes_and_layout():
    spec = ch.SynthSpec(n_patients=50, n_genes=60, n_pathways=4, genes_per_pathway=16,
                        overlap_genes=2, seed=1)
    c, pathways = ch.synth_cohort(spec)
    assert c.mut.shape == (50, 60) and c.cnv.shape == (50, 60)
    assert len(pathways) == 4
    assert all(len(genes) == 16 for _, _, genes in pathways)
    # adjacent windows share exactly the overlap
    assert len(set(pathways[0][2]) & set(pathways[1][2])) == 2
    assert set(np.unique(c.mut)) <= {0.0, 1.0}
    assert set(np.unique(c.labels)) == {0, 1}


def test_synth_positive_fraction_rounding():
    c, _ = ch.synth_cohort(ch.SynthSpec(n_patients=50, n_genes=60, n_pathways=4,
                                        positive_fraction=0.3, seed=2))
    assert int(c.labels.sum()) == 15


def test_synth_deterministic():
    spec = ch.SynthSpec(n_patients=30, n_genes=60, n_pathways=4, seed=9)
    a, _ = ch.synth_cohort(spec)
    b, _ = ch.synth_cohort(spec)
    np.testing.assert_array_equal(a.mut, b.mut)
    np.testing.assert_array_equal(a.cnv, b.cnv)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_synth_signal_lands_in_driver_genes_only():
    spec = ch.SynthSpec(n_patients=400, n_genes=120, n_pathways=7, genes_per_pathway=16,
                        overlap_genes=2, effect_size=4.0, driver_pathways=1, seed=4)
    c, pathways = ch.synth_cohort(spec)
    driver = [c.gene_ids.index(g) for g in pathways[0][2]]
    rest = [i for i in range(c.n_genes) if i not in driver]
    pos, neg = c.labels == 1, c.labels == 0
    assert c.cnv[pos][:, driver].mean() > 3.0
    assert abs(c.cnv[pos][:, rest].mean()) < 0.2
    assert abs(c.cnv[neg][:, driver].mean()) < 0.2
    assert c.mut[pos][:, driver].mean() > 0.15
    assert c.mut[neg][:, driver].mean() < 0.05


def test_synth_null_effect_is_exchangeable():
    assert ch.driver_mutation_rate(0.0) == ch.BACKGROUND_MUTATION_RATE
    spec = ch.SynthSpec(n_patients=2000, n_genes=60, n_pathways=4, effect_size=0.0, seed=6)
    c, pathways = ch.synth_cohort(spec)
    driver = [c.gene_ids.index(g) for g in pathways[0][2] + pathways[1][2]]
    pos, neg = c.labels == 1, c.labels == 0
    assert abs(c.mut[pos][:, driver].mean() - c.mut[neg][:, driver].mean()) < 0.01
    assert abs(c.cnv[pos][:, driver].mean() - c.cnv[neg][:, driver].mean()) < 0.1


def test_synth_signal_in_cnv_leaves_mutations_at_background():
    spec = ch.SynthSpec(n_patients=500, n_genes=60, n_pathways=4, effect_size=3.0,
                        signal_in="cnv", seed=8)
    c, pathways = ch.synth_cohort(spec)
    driver = [c.gene_ids.index(g) for g in pathways[0][2]]
    pos = c.labels == 1
    assert c.mut[pos][:, driver].mean() < 0.05
    assert c.cnv[pos][:, driver].mean() > 2.0


def test_synth_infeasible_layout_errors():
    with pytest.raises(ch.DataError):
        ch.synth_cohort(ch.SynthSpec(n_genes=50, n_pathways=25, genes_per_pathway=16))
    with pytest.raises(ch.DataError):
        ch.synth_cohort(ch.SynthSpec(signal_in="nope"))
    with pytest.raises(ch.DataError):
        ch.synth_cohort(ch.SynthSpec(genes_per_pathway=14))


# ---------------------------------------------------------------- file IO

def write_cohort(tmp_path, c):
    ch.write_matrix_tsv(tmp_path / "mut.tsv", c.patient_ids, c.gene_ids, c.mut)
    ch.write_matrix_tsv(tmp_path / "cnv.tsv", c.patient_ids, c.gene_ids, c.cnv)
    ch.write_labels_tsv(tmp_path / "labels.tsv", c.patient_ids, c.labels)
    return tmp_path / "mut.tsv", tmp_path / "cnv.tsv", tmp_path / "labels.tsv"


def test_load_cohort_roundtrip(tmp_path):
    c = small_cohort()
    paths = write_cohort(tmp_path, c)
    loaded = ch.load_cohort(*paths)
    assert loaded.patient_ids == c.patient_ids
    assert loaded.gene_ids == c.gene_ids
    np.testing.assert_array_equal(loaded.mut, c.mut)
    np.testing.assert_allclose(loaded.cnv, c.cnv, rtol=0, atol=0)  # repr round-trips exactly
    np.testing.assert_array_equal(loaded.labels, c.labels)


def test_load_cohort_reorders_cnv_to_match(tmp_path):
    c = small_cohort(n=6, g=4)
    ch.write_matrix_tsv(tmp_path / "mut.tsv", c.patient_ids, c.gene_ids, c.mut)
    perm_p = [3, 0, 5, 1, 4, 2]
    perm_g = [2, 0, 3, 1]
    ch.write_matrix_tsv(tmp_path / "cnv.tsv",
                        [c.patient_ids[i] for i in perm_p],
                        [c.gene_ids[j] for j in perm_g],
                        c.cnv[np.ix_(perm_p, perm_g)])
    ch.write_labels_tsv(tmp_path / "labels.tsv", c.patient_ids, c.labels)
    loaded = ch.load_cohort(tmp_path / "mut.tsv", tmp_path / "cnv.tsv", tmp_path / "labels.tsv")
    np.testing.assert_allclose(loaded.cnv, c.cnv)


def test_load_cohort_rejects_non_binary_mutation(tmp_path):
    c = small_cohort(n=5, g=3)
    c.mut[2, 1] = 2.0
    paths = write_cohort(tmp_path, c)
    with pytest.raises(ch.DataError, match="non-binary"):
        ch.load_cohort(*paths)


def test_load_cohort_rejects_patient_mismatch(tmp_path):
    c = small_cohort(n=5, g=3)
    ch.write_matrix_tsv(tmp_path / "mut.tsv", c.patient_ids, c.gene_ids, c.mut)
    ch.write_matrix_tsv(tmp_path / "cnv.tsv", ["X1"] + c.patient_ids[1:], c.gene_ids, c.cnv)
    ch.write_labels_tsv(tmp_path / "labels.tsv", c.patient_ids, c.labels)
    with pytest.raises(ch.DataError, match="patient"):
        ch.load_cohort(tmp_path / "mut.tsv", tmp_path / "cnv.tsv", tmp_path / "labels.tsv")


def test_load_cohort_rejects_gene_mismatch_and_duplicates(tmp_path):
    c = small_cohort(n=5, g=3)
    ch.write_matrix_tsv(tmp_path / "mut.tsv", c.patient_ids, c.gene_ids, c.mut)
    ch.write_matrix_tsv(tmp_path / "cnv.tsv", c.patient_ids, ["Z1", "Z2", "Z3"], c.cnv)
    ch.write_labels_tsv(tmp_path / "labels.tsv", c.patient_ids, c.labels)
    with pytest.raises(ch.DataError, match="gene columns"):
        ch.load_cohort(tmp_path / "mut.tsv", tmp_path / "cnv.tsv", tmp_path / "labels.tsv")
    dup = tmp_path / "dup.tsv"
    ch.write_matrix_tsv(dup, c.patient_ids, ["A", "A", "B"], c.mut)
    with pytest.raises(ch.DataError, match="duplicate gene"):
        ch.load_cohort(dup, tmp_path / "cnv.tsv", tmp_path / "labels.tsv")


def test_load_cohort_rejects_bad_labels(tmp_path):
    c = small_cohort(n=4, g=3)
    mut_p, cnv_p, _ = write_cohort(tmp_path, c)
    (tmp_path / "labels.tsv").write_text(
        "patient_id\tlabel\n" + "\n".join(f"{p}\t{v}" for p, v in zip(c.patient_ids, [0, 1, 2, 0])) + "\n")
    with pytest.raises(ch.DataError, match="label"):
        ch.load_cohort(mut_p, cnv_p, tmp_path / "labels.tsv")


def test_subset_copies_rows():
    c = small_cohort()
    sub = c.subset([3, 1, 7])
    assert sub.patient_ids == [c.patient_ids[3], c.patient_ids[1], c.patient_ids[7]]
    np.testing.assert_array_equal(sub.cnv, c.cnv[[3, 1, 7]])
    sub.cnv[0, 0] = 99.0
    assert c.cnv[3, 0] != 99.0
