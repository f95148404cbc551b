import numpy as np
import pytest
from numpy.testing import assert_allclose

from fewshot_gp.data import (
    DatasetCollection,
    DatasetError,
    SyntheticConfig,
    TaskDataset,
    denormalize,
    fit_record,
    generate_synthetic,
    grid_locations,
    load_csv,
    normalize,
    read_records,
    sample_field,
    split,
    write_csv,
    write_records,
)

TINY = dict(n_regions=4, n_attributes=3, grid=6)


def _collection(n_aux=0, seed=0):
    rng = np.random.default_rng(seed)
    tasks = {}
    for r in ("r1", "r2"):
        for c in ("temp", "rain"):
            n = int(rng.integers(3, 7))
            tasks[(r, c)] = TaskDataset(r, c, rng.standard_normal((n, 2 + n_aux)) * 3 + 1, rng.standard_normal(n) * 5)
    return DatasetCollection(tasks, n_aux)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def test_two_rows_one_task(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("region_id,attribute_id,x1,x2,y\nA,t,0.0,1.0,3.5\nA,t,1.0,0.0,-2\n")
    col = load_csv(p)
    assert len(col) == 1 and len(col[("A", "t")]) == 2
    assert col[("A", "t")].y.tolist() == [3.5, -2.0]


def test_non_numeric_value_names_line(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("region_id,attribute_id,x1,x2,y\nA,t,0,1,3\nA,t,1,0,abc\n")
    with pytest.raises(DatasetError, match=":3:"):
        load_csv(p)


def test_inconsistent_column_count(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("region_id,attribute_id,x1,x2,aux_1,y\nA,t,0,1,5,3\nA,t,1,0,2\n")
    with pytest.raises(DatasetError, match=":3:"):
        load_csv(p)


@pytest.mark.parametrize("text", ["", "region_id,attribute_id,x1,x2,y\n"])
def test_empty_file(tmp_path, text):
    p = tmp_path / "d.csv"
    p.write_text(text)
    with pytest.raises(DatasetError):
        load_csv(p)


def test_bad_header(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("region,attribute,x1,x2,y\nA,t,0,1,3\n")
    with pytest.raises(DatasetError, match="header"):
        load_csv(p)


@pytest.mark.parametrize("n_aux", [0, 2])
def test_csv_round_trip(tmp_path, n_aux):
    col = _collection(n_aux)
    write_csv(col, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv")
    assert back.n_aux == n_aux
    assert back.fingerprint() == col.fingerprint()


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def test_two_point_values():
    t = TaskDataset("r", "c", np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([0.0, 2.0]))
    rec = fit_record(t.x, t.y)
    assert (rec.y_mean, rec.y_std) == (1.0, 1.0)
    assert rec.normalize_y(t.y).tolist() == [-1.0, 1.0]


def test_constant_column_warns():
    x = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
    rec = fit_record(x, np.array([4.0, 4.0, 4.0]))
    assert rec.loc_std[1] == 1.0 and rec.y_std == 1.0
    assert len(rec.warnings) == 2
    assert not rec.normalize_y(np.array([4.0, 4.0])).any()


def test_single_point_std_one():
    rec = fit_record(np.array([[2.0, 3.0]]), np.array([7.0]))
    assert rec.y_std == 1.0 and rec.normalize_y(np.array([7.0])).tolist() == [0.0]


def test_normalized_moments_and_round_trip():
    col, records = normalize(_collection(n_aux=1))
    for t in col:
        assert_allclose(t.x.mean(axis=0), 0.0, atol=1e-9)
        assert_allclose(t.x.std(axis=0), 1.0, atol=1e-6)
        assert abs(t.y.mean()) <= 1e-9 and abs(t.y.std() - 1.0) <= 1e-6
    raw = _collection(n_aux=1)
    back = denormalize(col)
    for t in raw:
        u = back[t.key]
        assert np.abs(u.y - t.y).max() <= 1e-12 * np.abs(t.y).max()
        assert np.abs(u.x - t.x).max() <= 1e-12 * np.abs(t.x).max()
    assert set(records) == set(raw.tasks)


def test_support_only_uses_support_values():
    x = grid_locations(3)
    y = np.arange(9.0)
    rec = fit_record(x, y, "support-only", [0, 8])
    assert (rec.y_mean, rec.y_std) == (4.0, 4.0)
    assert rec.loc_mean == fit_record(x, y).loc_mean
    with pytest.raises(ValueError):
        fit_record(x, y, "support-only")


def test_records_sidecar_round_trip(tmp_path):
    _, records = normalize(_collection())
    write_records(records, tmp_path / "r.json")
    assert read_records(tmp_path / "r.json") == records


def test_denormalize_needs_record():
    with pytest.raises(DatasetError):
        denormalize(_collection())


# ---------------------------------------------------------------------------
# split
# ---------------------------------------------------------------------------


def _grid_collection(n_r, n_c):
    tasks = {(f"r{i}", f"c{j}"): TaskDataset(f"r{i}", f"c{j}", np.zeros((2, 2)), np.zeros(2))
             for i in range(n_r) for j in range(n_c)}
    return DatasetCollection(tasks)


def test_split_fraction_sizes():
    sp = split(_grid_collection(10, 10), (0.8, 0.1, 0.1), (0.8, 0.1, 0.1), seed=0)
    assert tuple(len(p) for p in sp.regions) == (8, 1, 1)
    assert tuple(len(p) for p in sp.attributes) == (8, 1, 1)


def test_split_counts_and_disjointness():
    sp = split(_grid_collection(60, 9), (40, 8, 12), (6, 2, 1), seed=3)
    assert len(sp.train) == 240 and len(sp.validation) == 16 and len(sp.target) == 12
    tr_r, tr_c = {t.region for t in sp.train}, {t.attribute for t in sp.train}
    for t in sp.target:
        assert t.region not in tr_r and t.attribute not in tr_c


def test_split_deterministic_and_seed_sensitive():
    col = _grid_collection(20, 6)
    a = split(col, (0.6, 0.2, 0.2), (0.5, 0.25, 0.25), seed=1)
    b = split(col, (0.6, 0.2, 0.2), (0.5, 0.25, 0.25), seed=1)
    c = split(col, (0.6, 0.2, 0.2), (0.5, 0.25, 0.25), seed=2)
    assert a.regions == b.regions and a.attributes == b.attributes
    assert a.regions != c.regions


def test_split_empty_part_errors():
    with pytest.raises(DatasetError):
        split(_grid_collection(3, 3), (0.8, 0.1, 0.1), (0.4, 0.3, 0.3))


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------


def test_degenerate_config_all_zero():
    cfg = SyntheticConfig(**TINY, amplitude=(0, 0), offset=(0, 0), slope=(0, 0), sin_amplitude=(0, 0),
                          noise_std=(0, 0))
    for t in generate_synthetic(cfg):
        assert not t.y.any()


def test_long_length_scale_field_nearly_constant():
    loc = grid_locations(8)
    f = sample_field(loc, 1e3, 0.7, np.random.default_rng(0))[0]
    diffs = f[:, None] - f[None, :]
    assert diffs.std() < 0.01 * 0.7


def test_field_covariance_monte_carlo():
    loc = grid_locations(6)
    ell, a = 0.5, 0.8
    draws = sample_field(loc, ell, a, np.random.default_rng(1), n=500)
    i, j = 3, 10
    prod = draws[:, i] * draws[:, j]
    expected = a**2 * np.exp(-((loc[i] - loc[j]) ** 2).sum() / (2 * ell**2))
    assert abs(prod.mean() - expected) <= 3 * prod.std(ddof=1) / np.sqrt(500)


def test_synthetic_shapes_determinism_and_finiteness():
    cfg = SyntheticConfig(**TINY, seed=5)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert a.fingerprint() == b.fingerprint()
    assert len(a) == 12
    for t in a:
        assert len(t) == 36 and np.isfinite(t.y).all()
        assert len({tuple(r) for r in t.x}) == 36
    assert generate_synthetic(SyntheticConfig(**TINY, seed=6)).fingerprint() != a.fingerprint()


def test_synthetic_grid_cap():
    with pytest.raises(DatasetError, match="grid"):
        generate_synthetic(SyntheticConfig(grid=20))


@pytest.mark.parametrize("bad", [dict(amplitude=(1.0, 0.5)), dict(length_scale=(0.0, 1.0)), dict(grid=1)])
def test_synthetic_config_validation(bad):
    with pytest.raises(ValueError):
        SyntheticConfig(**bad)


def test_synthetic_config_file(tmp_path):
    p = tmp_path / "syn.yaml"
    p.write_text("n_regions: 3\nn_attributes: 2\ngrid: 5\namplitude: [0.1, 0.2]\nseed: 4\n")
    cfg = SyntheticConfig.from_file(p)
    assert cfg.amplitude == (0.1, 0.2) and cfg.grid == 5
    assert SyntheticConfig(**{k: v for k, v in cfg.to_dict().items()}) == cfg
    p.write_text("colour: red\n")
    with pytest.raises(ValueError, match="colour"):
        SyntheticConfig.from_file(p)
