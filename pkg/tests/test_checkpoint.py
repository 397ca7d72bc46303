from __future__ import annotations

import json

import numpy as np
import pytest

from nasprune.checkpoint import load_checkpoint, save_checkpoint
from nasprune.errors import CorruptTableError, SchemaVersionError, TruncatedFileError
from nasprune.importance import PermutationRecord, apply_sorting, collect_stats, permute_weights, score_components
from nasprune.lora import attach_lora


def _sorted(w):
    calib = np.random.default_rng(0).integers(0, w.cfg.vocab_size, size=(4, w.cfg.max_seq_len))
    return apply_sorting(w, score_components(collect_stats(w, [calib])))


def test_roundtrip_is_bitwise(tiny_w, tmp_path):
    w = attach_lora(tiny_w, rank=4)
    w.block_scores = np.array([0.1, 1 / 3, 0.7])
    save_checkpoint(tmp_path / "a", w, stage="init", note={"x": [1, 2]})
    ck = load_checkpoint(tmp_path / "a")
    for k, v in w.params.items():
        assert ck.weights.params[k].tobytes() == v.tobytes()
    for k, v in w.lora.params.items():
        assert ck.weights.lora.params[k].tobytes() == v.tobytes()
    np.testing.assert_array_equal(ck.weights.block_scores, w.block_scores)
    assert ck.weights.cfg == w.cfg and ck.stage == "init" and ck.meta("note") == {"x": [1, 2]}
    assert ck.weights.lora.to_dict() == w.lora.to_dict()
    save_checkpoint(tmp_path / "b", ck.weights, **{k: v for k, v in ck.manifest.items()
                                                    if k not in ("tensors", "schema_version", "supernet",
                                                                 "block_scores", "lora")})
    assert (tmp_path / "a" / "tensors.bin").read_bytes() == (tmp_path / "b" / "tensors.bin").read_bytes()
    assert (tmp_path / "a" / "manifest").read_bytes() == (tmp_path / "b" / "manifest").read_bytes()


def test_truncated_file_names_entry(tiny_w, tmp_path):
    save_checkpoint(tmp_path, tiny_w)
    data = (tmp_path / "tensors.bin").read_bytes()
    (tmp_path / "tensors.bin").write_bytes(data[:-10])
    with pytest.raises(TruncatedFileError, match="pos|lm_head|final_norm|emb|blocks"):
        load_checkpoint(tmp_path)


def _edit_manifest(path, fn):
    m = json.loads((path / "manifest").read_text())
    fn(m)
    (path / "manifest").write_text(json.dumps(m))


def test_distinct_load_errors(tiny_w, tmp_path):
    save_checkpoint(tmp_path, tiny_w)
    _edit_manifest(tmp_path, lambda m: m.update(schema_version=99))
    with pytest.raises(SchemaVersionError):
        load_checkpoint(tmp_path)
    save_checkpoint(tmp_path, tiny_w)
    _edit_manifest(tmp_path, lambda m: m["tensors"][0].update(length=3))
    with pytest.raises(CorruptTableError, match="disagrees"):
        load_checkpoint(tmp_path)
    save_checkpoint(tmp_path, tiny_w)
    _edit_manifest(tmp_path, lambda m: m["tensors"].append(dict(m["tensors"][1])))
    with pytest.raises(CorruptTableError, match="twice"):
        load_checkpoint(tmp_path)
    save_checkpoint(tmp_path, tiny_w)
    _edit_manifest(tmp_path, lambda m: m["tensors"].pop())
    with pytest.raises(CorruptTableError, match="does not match"):
        load_checkpoint(tmp_path)
    (tmp_path / "manifest").write_text("{not json")
    with pytest.raises(CorruptTableError):
        load_checkpoint(tmp_path)


def test_resorting_after_reload_is_noop(tiny_w, tmp_path):
    sorted_w, record = _sorted(tiny_w)
    save_checkpoint(tmp_path, sorted_w, permutation=record.to_dict())
    ck = load_checkpoint(tmp_path)
    rec = PermutationRecord.from_dict(ck.meta("permutation"))
    assert rec.to_dict() == record.to_dict()
    resorted, rec2 = _sorted(ck.weights)
    assert rec2.is_identity()
    for k in sorted_w.params:
        np.testing.assert_array_equal(resorted.params[k], ck.weights.params[k])
    # the stored record undoes the sort exactly
    back = permute_weights(ck.weights, rec.inverse())
    for k in tiny_w.params:
        np.testing.assert_array_equal(back.params[k], tiny_w.params[k])
