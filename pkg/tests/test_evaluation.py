import json

import numpy as np
import pytest

from jamdetect import evaluation as EV
from jamdetect.tokenizer import ATTACKED, MASK, NO_ATTACK, build_sequence
import toydata


def _dataset(n=100, attacked=30, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.array([ATTACKED] * attacked + [NO_ATTACK] * (n - attacked))
    rng.shuffle(labels)
    seqs = []
    for i, lab in enumerate(labels):
        s = build_sequence(rng.integers(9, 59, 3), rng.integers(59, 109, 3), int(lab),
                           condition="LoS" if i % 2 else "NLoS",
                           meta={"distance_m": [100.0, 200.0, 500.0, 1000.0][i % 4], "attackers": 1 + i % 3})
        seqs.append(s)
    return seqs


def _oracle(seqs):
    """Reads the answer from a side table; the tokens it receives carry MASK at the label."""
    table = {tuple(s.tokens[:-1]): s.true_label for s in seqs}

    def predict(tokens):
        assert np.all(tokens[:, -1] == MASK)
        y = np.array([table[tuple(t[:-1])] for t in tokens])
        return y, (y == ATTACKED).astype(float)
    return predict


def _constant(label):
    return lambda tokens: (np.full(len(tokens), label), np.full(len(tokens), 0.25))


def test_oracle_predictor_scores_perfectly():
    seqs = _dataset()
    rep = EV.evaluate(_oracle(seqs), seqs)
    m = rep.metrics
    assert m["accuracy"] == 1.0 and m["fp"] == 0 and m["fn"] == 0
    assert m["tp"] + m["tn"] == m["n"] == 100


def test_constant_no_attack_on_thirty_percent():
    rep = EV.evaluate(_constant(NO_ATTACK), _dataset())
    m = rep.metrics
    assert m["accuracy"] == pytest.approx(0.70, abs=1e-12)
    assert m["recall"] == 0.0 and m["f1"] == 0.0
    assert m["majority_rate"] == pytest.approx(0.70)
    assert m["tp"] + m["fp"] + m["tn"] + m["fn"] == 100


def test_slices_recompose_overall_accuracy():
    seqs = _dataset(97, 41, seed=3)
    rng = np.random.default_rng(0)
    noisy = lambda t: (rng.choice([NO_ATTACK, ATTACKED], len(t)), rng.random(len(t)))  # noqa: E731
    rep = EV.evaluate(noisy, seqs)
    total = sum(s["accuracy"] * s["count"] for s in rep.slices) / sum(s["count"] for s in rep.slices)
    assert abs(total - rep.metrics["accuracy"]) <= 1e-12
    assert {s["distance_m"] for s in rep.by_distance} == {100.0, 200.0, 500.0, 1000.0}
    keys = [(s["condition"], s["distance_m"], s["attackers"]) for s in rep.slices]
    assert keys == sorted(keys)


def test_entropy_of_constant_probability():
    rep = EV.evaluate(_constant(NO_ATTACK), _dataset())
    h = -(0.25 * np.log(0.25) + 0.75 * np.log(0.75))
    assert rep.metrics["mean_entropy"] == pytest.approx(h, abs=1e-12)


def test_empty_test_set_is_an_error():
    with pytest.raises(ValueError):
        EV.evaluate(_constant(NO_ATTACK), [])


def test_evaluate_accepts_a_model():
    seqs = toydata.sequences(20)
    rep = EV.evaluate(toydata.model(), seqs)
    assert rep.metrics["n"] == 20
    assert rep == EV.evaluate(toydata.model(), seqs)


def test_json_csv_json_round_trip(tmp_path):
    rep = EV.evaluate(_constant(ATTACKED), _dataset(50, 20))
    j = EV.report(rep, tmp_path / "m.json", "json")
    back_j = EV.read_json(j)
    c = EV.report(back_j, tmp_path / "m.csv", "csv")
    back_c = EV.read_csv(c)
    assert back_c == rep and back_j == rep
    assert json.loads(j.read_text())["spec_version"] == EV.REPORT_VERSION


def test_empty_slice_map_writes_empty_table(tmp_path):
    rep = EV.MetricsReport(EV.compute_metrics(np.array([ATTACKED]), np.array([ATTACKED]), np.array([0.9])))
    path = EV.report(rep, tmp_path / "m.csv", "csv")
    rows = path.read_text().splitlines()
    assert rows[0].split(",") == list(EV.CSV_HEADER)
    assert not any(r.startswith("slice") for r in rows)
    assert EV.read_csv(path) == rep


def test_distance_rows_in_csv(tmp_path):
    rep = EV.evaluate(_constant(NO_ATTACK), _dataset())
    rows = (tmp_path / "m.csv")
    EV.write_csv(rep, rows)
    dist = [r.split(",") for r in rows.read_text().splitlines() if r.startswith("distance")]
    assert [float(r[3]) for r in dist] == [100.0, 200.0, 500.0, 1000.0]


def test_stable_field_order(tmp_path):
    rep = EV.evaluate(_constant(NO_ATTACK), _dataset())
    a = EV.write_json(rep, tmp_path / "a.json").read_text()
    b = EV.write_json(EV.read_json(tmp_path / "a.json"), tmp_path / "b.json").read_text()
    assert a == b


def test_unwritable_path_raises_os_error(tmp_path):
    rep = EV.evaluate(_constant(NO_ATTACK), _dataset())
    with pytest.raises(OSError):
        EV.report(rep, tmp_path / "missing" / "m.json")


def test_version_mismatch(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"spec_version": "0.1", "metrics": {}}))
    with pytest.raises(ValueError):
        EV.read_json(p)


def test_unknown_format():
    with pytest.raises(ValueError):
        EV.report(EV.MetricsReport({}), "x", "xml")
