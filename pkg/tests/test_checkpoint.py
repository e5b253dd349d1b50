import base64

import numpy as np
import pytest

from recem import checkpoint
from recem.checkpoint import CheckpointError
from recem.models import ConceptModel


def _model(cfg, seed=0):
    return ConceptModel(cfg.model_config(seed))


def test_roundtrip_is_byte_exact(tiny_config, tmp_path):
    m = _model(tiny_config, 2)
    blob = checkpoint.dumps(m, tiny_config, 2)
    back, cfg, seed = checkpoint.loads(blob)
    assert seed == 2 and cfg == tiny_config and back.trained
    assert checkpoint.dumps(back, cfg, seed) == blob
    for name, p in m.parameters().items():
        assert p.data.tobytes() == back.parameters()[name].data.tobytes()
    digest = checkpoint.save(tmp_path / "a.ckpt", m, tiny_config, 2)
    assert len(digest) == 64 and (tmp_path / "a.ckpt").read_bytes() == blob
    assert checkpoint.load(tmp_path / "a.ckpt")[2] == 2


def test_layout(tiny_config):
    text = checkpoint.dumps(_model(tiny_config), tiny_config, 0).decode()
    lines = text.splitlines()
    assert lines[0] == "RECEMCKPT v1" and lines[1] == "[config]"
    params = lines[lines.index("[params]") + 1:]
    names = [r.split(";")[0] for r in params]
    assert names == sorted(names)
    name, shape, payload = params[0].split(";")
    assert len(base64.b64decode(payload)) == 8 * np.prod([int(s) for s in shape.split(",")])


def test_wrong_header(tiny_config):
    blob = checkpoint.dumps(_model(tiny_config), tiny_config, 0)
    with pytest.raises(CheckpointError, match="header"):
        checkpoint.loads(blob.replace(b"RECEMCKPT v1", b"RECEMCKPT v9", 1))
    with pytest.raises(CheckpointError):
        checkpoint.loads(b"\xff\xfe")


def test_corrupted_payload_names_the_parameter(tiny_config):
    text = checkpoint.dumps(_model(tiny_config), tiny_config, 0).decode()
    lines = text.split("\n")
    i = lines.index("[params]") + 1
    name, shape, payload = lines[i].split(";")
    lines[i] = f"{name};{shape};{payload[:-4]}!!!!"
    with pytest.raises(CheckpointError, match=name):
        checkpoint.loads("\n".join(lines).encode())
    lines[i] = f"{name};{shape};{base64.b64encode(b'12345678').decode()}"
    with pytest.raises(CheckpointError, match="bytes"):
        checkpoint.loads("\n".join(lines).encode())
    lines[i] = "garbage"
    with pytest.raises(CheckpointError, match="malformed"):
        checkpoint.loads("\n".join(lines).encode())


def test_missing_section_and_missing_parameter(tiny_config):
    text = checkpoint.dumps(_model(tiny_config), tiny_config, 0).decode()
    with pytest.raises(CheckpointError, match="run"):
        checkpoint.loads(text.replace("[run]\nseed = 0\n", "").encode())
    lines = text.split("\n")
    i = lines.index("[params]") + 1
    del lines[i]
    with pytest.raises(CheckpointError, match="lacks"):
        checkpoint.loads("\n".join(lines).encode())


def test_variant_mismatch_is_reported(tiny_config):
    blob = checkpoint.dumps(_model(tiny_config), tiny_config, 0)
    with pytest.raises(CheckpointError, match="unknown"):
        checkpoint.loads(blob, tiny_config.with_(variant="CEM"))
    with pytest.raises(CheckpointError, match="shape"):
        checkpoint.loads(blob, tiny_config.with_(d=4))
