import csv
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from clasp.checkpoint import MAGIC, check_compatible, load_checkpoint, save_checkpoint, state_tensors
from clasp.config import load_json_config
from clasp.encoders import BACKGROUND, rgb_to_hex
from clasp.errors import ChecksumError, ConfigurationError, StructuralError
from clasp.metrics import MetricsRow, csv_header, export_metrics, load_history, save_history
from clasp.netpbm import read_pgm, read_ppm, write_pgm, write_ppm
from clasp.synthetic import SyntheticPersonSpec, generate_synthetic_dataset
from clasp.trainer import DinoConfig, TrainConfig, init_state


def test_synthetic_deterministic():
    a = generate_synthetic_dataset(1, seed=5)[0]
    b = generate_synthetic_dataset(1, seed=5)[0]
    assert a.image.values.tobytes() == b.image.values.tobytes()
    assert np.array_equal(a.part_map, b.part_map) and a.attributes == b.attributes
    c = generate_synthetic_dataset(1, seed=6)[0]
    assert a.image.values.tobytes() != c.image.values.tobytes()


def test_synthetic_background_only():
    s = generate_synthetic_dataset(3, seed=0, spec=SyntheticPersonSpec(background_fraction=1.0))
    assert all(not x.part_map.any() and x.parts == [] for x in s)


def test_synthetic_ground_truth_matches_pixels(oracle, vocab):
    # recover every pixel's part from its colour alone and compare with the stored map
    by_color = dict(oracle.palette)
    for s in generate_synthetic_dataset(20, seed=3, oracle=oracle, vocab=vocab):
        px = np.round(s.image.values * 255).astype(int).transpose(1, 2, 0)
        rebuilt = np.zeros_like(s.part_map)
        for (i, j), _ in np.ndenumerate(rebuilt):
            concept = by_color[rgb_to_hex(tuple(px[i, j]))]
            base = concept.split("+")[0]
            rebuilt[i, j] = 0 if base == BACKGROUND else vocab.label_id(base)
        assert np.array_equal(rebuilt, s.part_map)
        assert set(np.unique(s.part_map)) - {0} == {vocab.label_id(p) for p in s.parts}


def test_netpbm_roundtrip(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (3, 5, 7)) / 255.0
    write_ppm(tmp_path / "a.ppm", rgb)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), rgb)
    lab = np.random.default_rng(1).integers(0, 8, (5, 7))
    write_pgm(tmp_path / "a.pgm", lab)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), lab)
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "b.pgm", np.full((2, 2), 300))
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "a.pgm")


def test_netpbm_header_comments(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x03\x04")
    assert read_pgm(tmp_path / "c.pgm").tolist() == [[3, 4]]


def tiny_state():
    return init_state(TrainConfig(dino=DinoConfig(proto_dim=16, head_hidden=16)))


def test_checkpoint_roundtrip_bitwise(tmp_path):
    state = tiny_state()
    for p in state.model.trainable_parameters():
        p.grad = torch.randn_like(p)
    state.optimizer.step()  # populate moments
    tensors = state_tensors(state.model, state.optimizer)
    assert any(k.startswith("optim/") for k in tensors)
    save_checkpoint(tmp_path / "c.ckpt", tensors, {"a": 1}, 7, {"note": "x"})
    ck = load_checkpoint(tmp_path / "c.ckpt")
    assert ck.step == 7 and ck.config == {"a": 1} and ck.extra == {"note": "x"}
    assert set(ck.tensors) == set(tensors)
    for k, t in tensors.items():
        assert ck.tensors[k].numpy().tobytes() == t.detach().numpy().tobytes(), k


@given(st.lists(arrays(np.float32, st.integers(0, 6), elements=st.floats(width=32, allow_nan=False)), min_size=1, max_size=4))
def test_checkpoint_roundtrip_property(tmp_path_factory, arrs):
    path = tmp_path_factory.mktemp("ck") / "p.ckpt"
    tensors = {f"t{i}": torch.from_numpy(a.copy()) for i, a in enumerate(arrs)}
    save_checkpoint(path, tensors, {}, 0)
    back = load_checkpoint(path).tensors
    assert all(back[k].numpy().tobytes() == v.numpy().tobytes() for k, v in tensors.items())


def test_checkpoint_rejects_non_float32(tmp_path):
    with pytest.raises(StructuralError):
        save_checkpoint(tmp_path / "x.ckpt", {"a": torch.zeros(2, dtype=torch.float64)}, {}, 0)


def test_corrupt_payload_names_tensor(tmp_path):
    tensors = {"alpha": torch.ones(4), "beta": torch.zeros(3)}
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, tensors, {}, 0)
    data = bytearray(path.read_bytes())
    data[-1] ^= 0xFF  # last byte belongs to "beta" (names are sorted)
    path.write_bytes(bytes(data))
    with pytest.raises(ChecksumError) as e:
        load_checkpoint(path)
    assert e.value.tensor == "beta" and "beta" in str(e.value)


def test_structurally_broken_files(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, {"a": torch.ones(4)}, {}, 0)
    good = path.read_bytes()
    cases = {
        "magic": b"NOTACKPT" + good[8:],
        "header": MAGIC + b"\x01",
        "manifest": good[:20] + b"{{{" + good[23:],
        "payload": good[:-3],
    }
    for name, blob in cases.items():
        path.write_bytes(blob)
        with pytest.raises((StructuralError, ChecksumError)):
            load_checkpoint(path)


def test_mismatched_config_rejected_before_mutation(tmp_path):
    from clasp.encoders import StageShape
    from clasp.trainer import restore_state, save_state

    state = tiny_state()
    save_state(state, tmp_path / "c.ckpt")
    other = init_state(TrainConfig(dino=DinoConfig(proto_dim=16, head_hidden=16),
                                   stage_shapes=[StageShape(8, 8, 4), StageShape(20, 4, 2)]))
    before = {k: v.clone() for k, v in other.model.state_dict().items()}
    with pytest.raises(StructuralError):
        restore_state(other, tmp_path / "c.ckpt")
    for k, v in other.model.state_dict().items():
        assert torch.equal(v, before[k])
    assert other.step == 0
    with pytest.raises(StructuralError, match="missing"):
        check_compatible({}, {"w": torch.zeros(1)})


def row(step, total=1.0, gcr=math.nan):
    return MetricsRow(step, 0.5, 0.25, 0.125, 0.01, total, [0.3, 0.2], gcr, {"dino|part": 0.6}, wall_time=1.5)


def test_export_single_row(tmp_path):
    csv_path, summary_path = export_metrics([row(1)], tmp_path)
    lines = csv_path.read_text().splitlines()
    assert len(lines) == 2
    assert lines[0].split(",") == csv_header(2)
    assert "1.5" not in lines[1].split(",")  # wall time not exported
    summary = json.loads(summary_path.read_text())
    assert summary["rows"] == 1 and summary["columns"]["gcr"]["final"] is None


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
def test_summary_bounds(tmp_path_factory, totals):
    out = tmp_path_factory.mktemp("m")
    _, summary_path = export_metrics([row(i + 1, t) for i, t in enumerate(totals)], out)
    summary = json.loads(summary_path.read_text())["columns"]
    with open(out / "metrics.csv") as f:
        rows = list(csv.DictReader(f))
    for name, s in summary.items():
        vals = [float(r[name]) for r in rows if r[name] != "nan"]
        if vals:
            assert s["min"] <= min(vals) and s["max"] >= max(vals)
            assert s["final"] == vals[-1] or math.isnan(float(rows[-1][name]))


def test_reexport_byte_identical(tmp_path):
    hist = [row(1, 2.0, 0.25), row(2, 1.5), row(5, 1.0, 0.5)]
    export_metrics(hist, tmp_path / "a")
    export_metrics(hist, tmp_path / "b")
    for name in ("metrics.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_export_errors(tmp_path):
    with pytest.raises(ValueError):
        export_metrics([], tmp_path)
    with pytest.raises(ValueError):
        export_metrics([row(2), row(2)], tmp_path)


def test_history_roundtrip(tmp_path):
    hist = [row(1, 2.0, 0.25), row(2, 1.5)]
    save_history(hist, tmp_path / "h.json")
    back = load_history(tmp_path / "h.json")
    assert back[0] == hist[0] and math.isnan(back[1].gcr)


def test_config_file_unknown_key(tmp_path):
    (tmp_path / "ok.json").write_text(json.dumps({"steps": 3, "moe": {"num_experts": 4, "top_k": 2}}))
    cfg = load_json_config(TrainConfig, tmp_path / "ok.json")
    assert cfg.steps == 3 and cfg.moe.top_k == 2
    (tmp_path / "bad.json").write_text(json.dumps({"moe": {"experts": 4}}))
    with pytest.raises(ConfigurationError, match="experts"):
        load_json_config(TrainConfig, tmp_path / "bad.json")
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(ConfigurationError):
        load_json_config(TrainConfig, tmp_path / "broken.json")
