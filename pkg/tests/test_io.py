import json
import shutil
import struct

import numpy as np
import pytest

from rvfusion.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from rvfusion.data import (
    AnnotationSet,
    DataError,
    build_annotations,
    detections_to_records,
    load_annotations,
    load_dataset,
    load_detections,
)
from rvfusion.model import RVPAFCOS, DetectionBox, ModelConfig
from rvfusion.weights import WeightsError, load_weights, read_tensors, save_weights, write_tensors


@pytest.fixture
def dataset_copy(desk_dataset, tmp_path):
    root, manifest = desk_dataset
    dst = tmp_path / "ds"
    shutil.copytree(root, dst)
    return dst, manifest


# -- annotations ---------------------------------------------------------------------------------

def _ann():
    return build_annotations([(0, "a.png", 64, 64, [[1.5, 2.0, 11.5, 22.0]]), (1, "b.png", 64, 64, [])])


def test_annotation_schema():
    d = _ann().to_dict()
    assert d["annotations"] == [{"id": 1, "image_id": 0, "bbox": [1.5, 2.0, 10.0, 20.0], "category_id": 1,
                                 "area": 200.0}]
    assert d["categories"] == [{"id": 1, "name": "vehicle"}]


@pytest.mark.parametrize("mutate,match", [
    (lambda d: d["annotations"][0].pop("bbox"), "record 1: missing 'bbox'"),
    (lambda d: d["annotations"][0].update(image_id=9), "record 1: unknown image_id"),
    (lambda d: d["annotations"][0].update(area=5.0), "record 1: area"),
    (lambda d: d["annotations"][0].update(bbox=[0, 0, -1, 3]), "record 1: non-positive"),
    (lambda d: d["annotations"].append(dict(d["annotations"][0])), "record 1: duplicate id"),
    (lambda d: d["images"].append(dict(d["images"][0])), "image record 0: duplicate"),
    (lambda d: d["annotations"][0].update(category_id=4), "unknown category_id"),
])
def test_annotation_validation_names_record(mutate, match):
    d = json.loads(json.dumps(_ann().to_dict()))
    mutate(d)
    with pytest.raises(DataError, match=match):
        AnnotationSet.from_dict(d)


def test_annotation_file_errors(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_annotations(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(DataError, match="not valid JSON"):
        load_annotations(tmp_path / "bad.json")


# -- dataset loading -----------------------------------------------------------------------------

def test_round_trip_preserves_boxes_exactly(desk_dataset):
    from rvfusion.scene_sim import SimConfig, generate_frame
    root, manifest = desk_dataset
    samples = load_dataset(root, "train")
    assert [s.image_id for s in samples] == sorted(manifest.splits["train"])
    for s in samples:
        _, vision, boxes, _, radar = generate_frame(SimConfig(image_size=128), manifest.seed, s.image_id)
        assert np.array_equal(s.boxes, np.array([b for _, b in boxes]).reshape(-1, 4))
        assert np.array_equal(s.vision, vision) and np.array_equal(s.radar, radar)


def test_empty_split_loads_as_empty_list(tmp_path):
    (tmp_path / "annotations_x.json").write_text(json.dumps({"images": [], "annotations": []}))
    assert load_dataset(tmp_path, "x") == []


def test_missing_vision_names_frame(dataset_copy):
    root, m = dataset_copy
    fid = m.splits["val"][0]
    (root / "val" / "vision" / f"frame_{fid:06d}.png").unlink()
    with pytest.raises(DataError, match=f"frame_{fid:06d}"):
        load_dataset(root, "val")


def test_missing_radar_names_frame(dataset_copy):
    root, m = dataset_copy
    fid = m.splits["val"][1]
    (root / "val" / "radar_png" / f"frame_{fid:06d}.png").unlink()
    (root / "val" / "radar_raw" / f"frame_{fid:06d}.json").unlink()
    with pytest.raises(DataError, match=f"frame_{fid:06d}"):
        load_dataset(root, "val")


def test_raw_radar_rerendered_when_png_missing(dataset_copy, desk_dataset):
    root, m = dataset_copy
    fid = m.splits["test"][0]
    (root / "test" / "radar_png" / f"frame_{fid:06d}.png").unlink()
    reloaded = {s.image_id: s for s in load_dataset(root, "test")}
    original = {s.image_id: s for s in load_dataset(desk_dataset[0], "test")}
    assert reloaded[fid].radar_frame is not None
    assert np.array_equal(reloaded[fid].radar, original[fid].radar)


def test_malformed_raw_frame_and_annotation(dataset_copy):
    root, m = dataset_copy
    fid = m.splits["test"][0]
    (root / "test" / "radar_png" / f"frame_{fid:06d}.png").unlink()
    (root / "test" / "radar_raw" / f"frame_{fid:06d}.json").write_text('{"t": 0}')
    with pytest.raises(DataError, match="malformed radar frame"):
        load_dataset(root, "test")
    ann = json.loads((root / "annotations_val.json").read_text())
    ann["annotations"][0]["area"] += 1
    (root / "annotations_val.json").write_text(json.dumps(ann))
    with pytest.raises(DataError, match=f"record {ann['annotations'][0]['id']}"):
        load_dataset(root, "val")


def test_size_mismatch_detected(dataset_copy):
    root, m = dataset_copy
    ann = json.loads((root / "annotations_train.json").read_text())
    ann["images"][0]["width"] = 100
    (root / "annotations_train.json").write_text(json.dumps(ann))
    with pytest.raises(DataError, match="!= annotated"):
        load_dataset(root, "train")


def test_detection_records_schema(tmp_path):
    recs = detections_to_records([7], [[DetectionBox(1.0, 2.0, 5.0, 10.0, 0.75, 1)]])
    assert recs == [{"id": 1, "image_id": 7, "bbox": [1.0, 2.0, 4.0, 8.0], "category_id": 1, "area": 32.0,
                     "score": 0.75}]
    (tmp_path / "d.json").write_text(json.dumps(recs))
    assert load_detections(tmp_path / "d.json") == recs
    (tmp_path / "e.json").write_text(json.dumps([{"bbox": [0, 0, 1, 1]}]))
    with pytest.raises(DataError, match="missing"):
        load_detections(tmp_path / "e.json")


# -- weights -------------------------------------------------------------------------------------

def test_weights_round_trip_within_float32_rounding(tmp_path):
    m = RVPAFCOS(ModelConfig(fusion="SAC", seed=2, residual_scale_init=0.3))
    path = tmp_path / "m.rvpw"
    save_weights(m, path)
    back = load_weights(path)
    assert back.cfg == m.cfg
    pairs = list(zip(m.named_parameters(), back.named_parameters()))
    assert len(pairs) == len(m.parameters())
    for (na, a), (nb, b) in pairs:
        assert na == nb and a.shape == b.shape
        bound = 2.0 ** -23 * max(float(np.abs(a.data).max()), 1e-30)
        assert float(np.abs(a.data - b.data).max()) <= bound


def test_weights_file_layout(tmp_path):
    path = tmp_path / "t.rvpw"
    write_tensors({"w": np.arange(6, dtype=np.float32).reshape(2, 3)}, path)
    raw = path.read_bytes()
    assert raw[:4] == b"RVPW" and struct.unpack("<HI", raw[4:10]) == (1, 1)
    assert struct.unpack("<I", raw[10:14]) == (1,) and raw[14:15] == b"w" and raw[15] == 2
    assert struct.unpack("<II", raw[16:24]) == (2, 3) and len(raw) == 24 + 6 * 4
    assert np.array_equal(read_tensors(path)["w"], np.arange(6).reshape(2, 3))


@pytest.mark.parametrize("corrupt,match", [
    (lambda b: b[:-3], "truncated"),
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<H", 9) + b[6:], "version"),
    (lambda b: b + b"\0", "trailing"),
])
def test_corrupt_weights_rejected(tmp_path, corrupt, match):
    path = tmp_path / "t.rvpw"
    write_tensors({"a": np.ones(3, np.float32), "b": np.zeros((2, 2), np.float32)}, path)
    path.write_bytes(corrupt(path.read_bytes()))
    with pytest.raises(WeightsError, match=match):
        read_tensors(path)


def test_load_weights_into_wrong_architecture(tmp_path):
    path = tmp_path / "m.rvpw"
    save_weights(RVPAFCOS(ModelConfig(fusion="ADD")), path)
    with pytest.raises(WeightsError):
        load_weights(path, RVPAFCOS(ModelConfig(fusion="SAC")))


# -- command line --------------------------------------------------------------------------------

def _train_config(tmp_path, iterations=2):
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"model": {"input_size": 128, "dtype": "float32"},
                               "train": {"iterations": iterations, "batch_pairs": 2}}))
    return cfg


def test_cli_usage_errors(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["simulate", "--bogus"]) == EXIT_USAGE
    assert main(["train", "--data", "x", "--out", "y", "--fusion", "max"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_cli_data_errors(tmp_path):
    assert main(["eval", "--dets", str(tmp_path / "none.json"), "--ann", str(tmp_path / "a.json")]) == EXIT_DATA
    assert main(["project", "--rig", str(tmp_path / "rig.json"), "--rho", "10", "--theta-deg", "0",
                 "--phi-deg", "0"]) == EXIT_DATA
    assert main(["simulate", "--frames", "5", "--out", str(tmp_path / "o")]) != EXIT_OK


def test_cli_eval_perfect_detections(desk_dataset, tmp_path, capsys):
    root, _ = desk_dataset
    ann = json.loads((root / "annotations_test.json").read_text())
    dets = [dict(a, score=1.0) for a in ann["annotations"]]
    (tmp_path / "dets.json").write_text(json.dumps(dets))
    rc = main(["eval", "--dets", str(tmp_path / "dets.json"), "--ann", str(root / "annotations_test.json"),
               "--json", str(tmp_path / "r.json")])
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    assert "100.0" in out and "AP50(100)" in out
    assert json.loads((tmp_path / "r.json").read_text())["ap"] == 100.0


def test_cli_project_and_encode(desk_dataset, tmp_path, capsys):
    root, m = desk_dataset
    assert main(["project", "--rig", str(root / "rig.json"), "--rho", "20", "--theta-deg", "0",
                 "--phi-deg", "0"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "x_p" in out and "in_frame" in out
    fid = m.splits["train"][0]
    png = tmp_path / "r.png"
    assert main(["encode-radar", "--in", str(root / "train" / "radar_raw" / f"frame_{fid:06d}.json"),
                 "--rig", str(root / "rig.json"), "--out", str(png)]) == EXIT_OK
    assert png.read_bytes() == (root / "train" / "radar_png" / f"frame_{fid:06d}.png").read_bytes()


def test_cli_train_infer_eval_deterministic(desk_dataset, tmp_path):
    root, _ = desk_dataset
    cfg = _train_config(tmp_path)
    outs = []
    for run in ("a", "b"):
        w = tmp_path / f"{run}.rvpw"
        assert main(["train", "--data", str(root), "--config", str(cfg), "--fusion", "sac",
                     "--sac-kernels", "1,3", "--out", str(w), "--seed", "5",
                     "--loss-csv", str(tmp_path / f"{run}.csv")]) == EXIT_OK
        d = tmp_path / f"{run}_dets.json"
        assert main(["infer", "--weights", str(w), "--data", str(root), "--split", "test", "--out", str(d)]) == EXIT_OK
        r = tmp_path / f"{run}_metrics.json"
        assert main(["eval", "--dets", str(d), "--ann", str(root / "annotations_test.json"),
                     "--json", str(r)]) == EXIT_OK
        outs.append([p.read_bytes() for p in (w, w.with_name(w.name + ".json"), d, r, tmp_path / f"{run}.csv")])
    assert outs[0] == outs[1]
    assert json.loads((tmp_path / "a.rvpw.json").read_text())["model"]["sac_kernels"] == [1, 3]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_divergence_exit_code(desk_dataset, tmp_path):
    root, _ = desk_dataset
    cfg = tmp_path / "hot.json"
    cfg.write_text(json.dumps({"model": {"input_size": 128, "dtype": "float32"},
                               "train": {"iterations": 30, "batch_pairs": 2, "lr": 1e6}}))
    assert main(["train", "--data", str(root), "--config", str(cfg), "--out", str(tmp_path / "w.rvpw")]) \
        == EXIT_NUMERIC


def test_cli_gradcheck(capsys):
    assert main(["gradcheck"]) == EXIT_OK
    assert "PASS conv2d" in capsys.readouterr().out
