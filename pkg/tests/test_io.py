import numpy as np
import pytest

from funmon.basis import build_basis
from funmon.errors import (
    DuplicateRecord,
    IntegrityError,
    ParseError,
    SchemaError,
    UnsupportedVersion,
)
from funmon.io import (
    canonical_json,
    export_csv,
    ingest_csv,
    load_model,
    outcome_record,
    save_model,
    write_outcomes,
)
from funmon.mfpca import FunctionalSample
from funmon.monitoring import phase1_fit, phase2_evaluate
from funmon.simulate import SimConfig, generate


@pytest.fixture(scope="module")
def basis():
    return build_basis((0.0, 1.0), K=8, order=4)


@pytest.fixture(scope="module")
def reference(basis):
    from funmon.mfpca import sample_from_profiles

    profiles, _ = generate(SimConfig(n=120, p=2, seed=0, grid_size=60))
    sample, lambdas = sample_from_profiles(profiles, basis, lambdas=[1e-4, 1e-4])
    return sample, lambdas, profiles


def test_canonical_json_determinism():
    obj = {"b": [1.0, 2.5, np.pi], "a": {"x": 1, "y": None, "z": True}}
    assert canonical_json(obj) == canonical_json(obj)
    assert canonical_json(obj).startswith('{"a":')
    assert format(np.pi, ".17g") in canonical_json(obj)
    # round trip through text preserves every bit
    import json

    parsed = json.loads(canonical_json(obj))
    assert parsed["b"][2] == np.pi


def test_csv_round_trip(tmp_path):
    profiles, _ = generate(SimConfig(n=10, p=2, seed=1, grid_size=25, noise_sd=0.2))
    path = tmp_path / "data.csv"
    export_csv(profiles, path, components=["alpha", "beta"])
    report = ingest_csv(path, domain=(0.0, 1.0))
    assert report.components == ["alpha", "beta"]
    assert len(report.profiles) == 10
    assert report.counts["alpha"] == 10 * 25
    for orig, back in zip(profiles, report.profiles):
        assert back.obs_id == orig.obs_id
        for k in range(2):
            assert np.array_equal(back.argvals[k], orig.argvals[k])
            assert np.array_equal(back.values[k], orig.values[k])


def test_csv_error_contracts(tmp_path):
    bad_header = tmp_path / "bad.csv"
    bad_header.write_text("obs,component,t,y\na,c0,0.1,2\n")
    with pytest.raises(SchemaError):
        ingest_csv(bad_header, domain=(0, 1))

    bad_value = tmp_path / "badval.csv"
    lines = ["obs_id,component,t,y"] + [f"a,c0,0.{i},1.0" for i in range(1, 6)]
    lines.insert(6, "a,c0,0.7,not-a-number")  # line 7 of the file
    bad_value.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError, match="line 7"):
        ingest_csv(bad_value, domain=(0, 1))

    dup = tmp_path / "dup.csv"
    dup.write_text("obs_id,component,t,y\na,c0,0.1,1\na,c0,0.1,2\n")
    with pytest.raises(DuplicateRecord):
        ingest_csv(dup, domain=(0, 1))

    outside = tmp_path / "outside.csv"
    outside.write_text("obs_id,component,t,y\na,c0,1.5,1\n")
    with pytest.raises(ParseError):
        ingest_csv(outside, domain=(0, 1))


def test_missing_component_becomes_empty_block(tmp_path):
    path = tmp_path / "partial.csv"
    path.write_text(
        "obs_id,component,t,y\n"
        "a,c0,0.1,1\na,c0,0.2,2\na,c1,0.1,5\n"
        "b,c0,0.1,3\n"
    )
    report = ingest_csv(path, domain=(0, 1))
    assert report.profiles[1].values[1].size == 0


def test_monitoring_archive_round_trip(tmp_path, reference):
    sample, lambdas, profiles = reference
    model = phase1_fit(sample, seed=3, lambdas=lambdas)
    path = tmp_path / "model.json"
    blob1 = save_model(model, path)
    loaded = load_model(path)

    for prof in profiles[:25]:
        a = phase2_evaluate(prof, model)
        b = phase2_evaluate(prof, loaded)
        assert a.t2 == b.t2 and a.spe == b.spe
        assert a.signal == b.signal
        assert a.flagged_components == b.flagged_components

    blob2 = save_model(loaded, tmp_path / "model2.json")
    assert blob1 == blob2  # identical model -> identical bytes


def test_archive_version_and_integrity(tmp_path, reference):
    sample, lambdas, _ = reference
    model = phase1_fit(sample, seed=4)
    path = tmp_path / "model.json"
    save_model(model, path)

    import json

    doc = json.loads(path.read_text())
    doc["format_version"] = 99
    (tmp_path / "future.json").write_text(json.dumps(doc))
    with pytest.raises(UnsupportedVersion):
        load_model(tmp_path / "future.json")

    doc = json.loads(path.read_text())
    doc["payload"]["cl_t2"] = doc["payload"]["cl_t2"] + 1.0
    (tmp_path / "tampered.json").write_text(json.dumps(doc))
    with pytest.raises(IntegrityError):
        load_model(tmp_path / "tampered.json")

    (tmp_path / "garbage.json").write_bytes(b"\x00\x01binary")
    with pytest.raises(IntegrityError):
        load_model(tmp_path / "garbage.json")


def test_frcc_archive_round_trip(tmp_path, basis):
    from funmon.frcc import frcc_phase1, frcc_phase2
    from funmon.mfpca import sample_from_profiles

    x_profiles, _ = generate(SimConfig(n=150, p=2, seed=5, grid_size=50))
    y_profiles, _ = generate(SimConfig(n=150, p=1, seed=6, grid_size=50))
    X, _ = sample_from_profiles(x_profiles, basis, lambdas=[1e-4, 1e-4])
    Y, _ = sample_from_profiles(y_profiles, basis, lambdas=[1e-4])
    model = frcc_phase1(X, Y, seed=7, choice="studentized")
    path = tmp_path / "frcc.json"
    save_model(model, path)
    loaded = load_model(path)
    for i in range(10):
        a = frcc_phase2(X.coeffs[i], Y.coeffs[i], model)
        b = frcc_phase2(X.coeffs[i], Y.coeffs[i], loaded)
        assert a.t2 == b.t2 and a.spe == b.spe


def test_romfcc_archive_round_trip(tmp_path, reference):
    from funmon.robust import romfcc_phase1, romfcc_phase2

    sample, _, _ = reference
    model = romfcc_phase1(sample, seed=8)
    path = tmp_path / "romfcc.json"
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.kind == "romfcc"
    for row in sample.coeffs[:10]:
        a, b = romfcc_phase2(row, model), romfcc_phase2(row, loaded)
        assert a.t2 == b.t2 and a.spe == b.spe


def test_frtm_archive_round_trip(tmp_path):
    from funmon.frtm import Curve, FdtwConfig, frtm_phase1, frtm_phase2

    rng = np.random.default_rng(9)
    x = np.linspace(0, 1, 120)
    curves = [
        Curve(x, np.sin(2 * np.pi * (x + a)) + 1.5 * x + 0.02 * rng.normal(size=120))
        for a in rng.uniform(-0.05, 0.05, 60)
    ]
    model = frtm_phase1(
        curves,
        monitoring_grid=[0.5, 1.0],
        config=FdtwConfig(grid_sizes=(41, 41)),
        split=0.5125,
        seed=10,
        amp_dim=10,
        warp_dim=6,
    )
    path = tmp_path / "frtm.json"
    save_model(model, path)
    loaded = load_model(path)
    a = frtm_phase2(curves[0], model)
    b = frtm_phase2(curves[0], loaded)
    assert a.t2 == b.t2 and a.spe == b.spe and a.context == b.context


def test_amfewma_archive_round_trip(tmp_path, basis, reference):
    from funmon.adaptive import amfewma_phase1, amfewma_phase2

    sample, _, _ = reference
    model = amfewma_phase1(
        sample, lambda_grid=(0.3,), k_grid=(2.0,), target_arl=15.0, n_boot=60, seed=11
    )
    path = tmp_path / "amfewma.json"
    save_model(model, path)
    loaded = load_model(path)
    stream = sample.coeffs[:15]
    assert amfewma_phase2(stream, model) == amfewma_phase2(stream, loaded)


def test_amfcc_archive_round_trip(tmp_path, basis):
    from funmon.adaptive import amfcc_evaluate, amfcc_fit

    profiles, _ = generate(SimConfig(n=80, p=2, seed=12, grid_size=60))
    model = amfcc_fit(profiles, basis, lambda_grid=[1e-4], L_grid=[2], seed=13)
    path = tmp_path / "amfcc.json"
    save_model(model, path)
    loaded = load_model(path)
    for prof in profiles[:8]:
        a = amfcc_evaluate(prof, model)
        b = amfcc_evaluate(prof, loaded)
        assert a[0] == b[0] and a[1] == b[1]
        assert np.array_equal(a[2]["t2"], b[2]["t2"])


def test_outcome_records(tmp_path, reference):
    sample, lambdas, profiles = reference
    model = phase1_fit(sample, seed=14)
    outcomes = [phase2_evaluate(row, model) for row in sample.coeffs[:5]]
    records = [outcome_record(o, model) for o in outcomes]
    path = tmp_path / "out.jsonl"
    write_outcomes(records, path)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 5
    import json

    parsed = json.loads(lines[0])
    assert {"t2", "spe", "signal", "cl_t2"} <= set(parsed)
