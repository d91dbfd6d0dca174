import json

import numpy as np
import pytest
from PIL import Image

# conformance side: the files must load through the engine's own reader
from mmie.mmtf import read_tensor_file
from mmie.data import load_manifest

from mmie_export import ExporterError
from mmie_export.cli import main
from mmie_export.images import UntrainedImageEncoder, export_image_features
from mmie_export.text import UntrainedTextEncoder, export_text_features
from mmie_export import mmtf as xmmtf


@pytest.fixture(scope="module")
def text_encoder():
    return UntrainedTextEncoder(seed=0)


@pytest.fixture(scope="module")
def image_encoder():
    return UntrainedImageEncoder(seed=0)


def make_image(path, w=64, h=48, color=(200, 30, 90)):
    img = Image.new("RGB", (w, h), color)
    img.putpixel((3, 4), (0, 255, 0))
    img.save(path)
    return path


def test_own_writer_matches_engine_reader(tmp_path):
    rng = np.random.default_rng(0)
    t = rng.standard_normal((3, 7)).astype(np.float32)
    path = tmp_path / "x.mmtf"
    xmmtf.write_tensor_file(t, path)
    back = read_tensor_file(path)
    assert back.tobytes() == t.tobytes()


def test_text_export_shapes_and_engine_load(tmp_path, text_encoder):
    frags = export_text_features([("a", ["three", "word", "line"])],
                                 tmp_path, text_encoder)
    assert frags == [{"id": "a", "text_ref": "text/a.mmtf"}]
    feats = read_tensor_file(tmp_path / "text" / "a.mmtf")
    assert feats.shape == (5, 768)
    assert feats.dtype == np.float32


def test_text_export_rejects_empty_sentence(tmp_path, text_encoder):
    with pytest.raises(ExporterError, match="empty"):
        export_text_features([("bad", [])], tmp_path, text_encoder)


def test_text_export_idempotent(tmp_path, text_encoder):
    sentences = [("s1", ["same", "input"])]
    export_text_features(sentences, tmp_path / "one", text_encoder)
    export_text_features(sentences, tmp_path / "two", text_encoder)
    a = (tmp_path / "one" / "text" / "s1.mmtf").read_bytes()
    b = (tmp_path / "two" / "text" / "s1.mmtf").read_bytes()
    assert a == b


def test_identical_tokens_identical_rows(tmp_path, text_encoder):
    rows = text_encoder.encode(["echo", "mid", "echo"])
    # same token id at both ends, but contextual layers may differ; the
    # hash mapping itself must collide exactly
    assert text_encoder._token_id("echo") == text_encoder._token_id("echo")
    assert rows.shape == (5, 768)


def test_image_export_shapes(tmp_path, image_encoder):
    img = make_image(tmp_path / "pic.png")
    out = tmp_path / "feats.mmtf"
    export_image_features(img, [], out, image_encoder)
    assert read_tensor_file(out).shape == (1, 2048)

    boxes = [[0, 0, 10, 10], [5, 5, 30, 20], [1, 1, 64, 48]]
    export_image_features(img, boxes, out, image_encoder)
    assert read_tensor_file(out).shape == (4, 2048)


def test_image_export_invalid_box(tmp_path, image_encoder):
    img = make_image(tmp_path / "pic.png")
    with pytest.raises(ExporterError, match="bounds"):
        export_image_features(img, [[0, 0, 999, 10]],
                              tmp_path / "o.mmtf", image_encoder)
    with pytest.raises(ExporterError, match="box"):
        export_image_features(img, [[5, 5]], tmp_path / "o.mmtf",
                              image_encoder)


def test_image_export_unreadable_image(tmp_path, image_encoder):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not an image at all")
    with pytest.raises(ExporterError, match="unreadable"):
        export_image_features(bad, [], tmp_path / "o.mmtf", image_encoder)


def test_cli_chain_produces_engine_ready_manifest(tmp_path):
    raw_dir = tmp_path / "raw"
    raw_dir.mkdir()
    make_image(raw_dir / "img0.png")
    make_image(raw_dir / "img1.png", color=(10, 180, 220))
    manifest = raw_dir / "raw.jsonl"
    with open(manifest, "w") as fh:
        fh.write(json.dumps({"id": "e0", "tokens": ["rob", "is", "here"],
                             "bio_labels": ["B-PER", "O", "O"],
                             "image": "img0.png"}) + "\n")
        fh.write(json.dumps({"id": "e1", "tokens": ["acme", "hired", "bob"],
                             "bio_labels": ["B-ORG", "O", "B-PER"],
                             "image": "img1.png"}) + "\n")
    boxes = raw_dir / "boxes.jsonl"
    boxes.write_text(json.dumps({"image": "img0.png",
                                 "boxes": [[0, 0, 20, 20]]}) + "\n")

    # both stages share one out-dir; the manifest is rewritten in place
    out = tmp_path / "features"
    rc = main(["text", "--manifest", str(manifest), "--out-dir", str(out),
               "--untrained"])
    assert rc == 0
    rc = main(["images", "--manifest", str(out / "manifest.jsonl"),
               "--images-root", str(raw_dir), "--boxes", str(boxes),
               "--out-dir", str(out), "--untrained"])
    assert rc == 0

    examples = load_manifest(out / "manifest.jsonl")
    assert len(examples) == 2
    assert examples[0].text_feats.shape == (5, 768)
    assert examples[0].image.shape == (2, 2048)   # whole + 1 box
    assert examples[1].image.shape == (1, 2048)   # whole image only


def test_cli_missing_image_key(tmp_path):
    manifest = tmp_path / "m.jsonl"
    manifest.write_text(json.dumps({"id": "x", "tokens": ["a"]}) + "\n")
    rc = main(["images", "--manifest", str(manifest), "--images-root",
               str(tmp_path), "--out-dir", str(tmp_path / "o"),
               "--untrained"])
    assert rc == 1


def test_pretrained_path_aborts_with_instructions(tmp_path, capsys):
    manifest = tmp_path / "m.jsonl"
    manifest.write_text(json.dumps({"id": "x", "tokens": ["a"]}) + "\n")
    rc = main(["text", "--manifest", str(manifest), "--out-dir",
               str(tmp_path / "o"), "--model",
               str(tmp_path / "no_such_model_dir")])
    assert rc == 1
    err = capsys.readouterr().err
    assert "save_pretrained" in err
