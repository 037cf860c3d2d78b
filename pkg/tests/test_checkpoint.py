import logging

import pytest
import torch

from rrlab.checkpoint import Checkpoint, dumps, load_checkpoint, loads, save_checkpoint
from rrlab.errors import ParseError, VersionError
from rrlab.model import Architecture, forward_batch, init_params

log = logging.getLogger(__name__)


@pytest.fixture
def ckpt(toy_model):
    forward_batch(toy_model, torch.randn(8, 4, dtype=torch.float64), mode="train")
    return Checkpoint.from_model(toy_model, config_digest="abc123", seed=7, epoch=3)


def test_save_load_is_bit_exact(ckpt, tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    assert loaded.same_as(ckpt)
    assert loaded.arch == ckpt.arch
    assert loaded.config_digest == "abc123"
    assert (loaded.seed, loaded.epoch) == (7, 3)


def test_dumps_is_stable(ckpt):
    text = dumps(ckpt)
    assert text.startswith("RRLAB-CKPT v1\n")
    assert text.endswith("end\n")
    assert dumps(loads(text.encode())) == text
    assert "num_batches_tracked" not in text


def test_rebuilt_model_predicts_identically(ckpt, toy_model):
    X = torch.randn(5, 4, dtype=torch.float64)
    rebuilt = loads(dumps(ckpt).encode()).build_model()
    assert torch.equal(forward_batch(rebuilt, X).r_con, forward_batch(toy_model, X).r_con)


def test_empty_widths_round_trip():
    model = init_params(Architecture(input_dim=3, widths=(), n_classes=2), seed=1)
    ckpt = Checkpoint.from_model(model)
    text = dumps(ckpt)
    assert "meta widths -" in text
    assert loads(text.encode()).same_as(ckpt)


def test_unknown_version(ckpt):
    data = dumps(ckpt).replace("RRLAB-CKPT v1", "RRLAB-CKPT v2", 1).encode()
    with pytest.raises(VersionError, match="version 2"):
        loads(data)


def test_bad_header():
    with pytest.raises(ParseError, match="byte 0") as exc:
        loads(b"NOT-A-CKPT v1\nend\n")
    assert exc.value.location == 0


def test_truncated_file_names_offset(ckpt):
    data = dumps(ckpt).encode()
    cut = data[: len(data) // 2]
    cut = cut[: cut.rfind(b"\n") + 1]
    with pytest.raises(ParseError) as exc:
        loads(cut)
    assert exc.value.location == len(cut)
    log.info("truncated at %d: %s", len(cut), exc.value)


def test_non_numeric_value_names_offset(ckpt):
    text = dumps(ckpt)
    marker = "array head.bias 3\n"
    start = text.index(marker) + len(marker)
    broken = text[:start] + "0 zero 0" + text[text.index("\n", start):]
    with pytest.raises(ParseError, match=f"byte {start}"):
        loads(broken.encode())


def test_wrong_value_count(ckpt):
    text = dumps(ckpt)
    marker = "array head.bias 3\n"
    start = text.index(marker) + len(marker)
    broken = text[:start] + "0 0" + text[text.index("\n", start):]
    with pytest.raises(ParseError, match="expected 3 values"):
        loads(broken.encode())


def test_missing_array_fails_build(ckpt):
    del ckpt.state["head.bias"]
    with pytest.raises(ParseError, match="missing"):
        ckpt.build_model()
