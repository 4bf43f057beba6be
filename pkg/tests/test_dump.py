import csv
import os

import numpy as np
import pytest

from repre.pipeline.data import read_ppm, synthetic_shapes
from repre.pipeline.dump import attention_maps, dump_diagnostics, triptych
from repre.pipeline.train import Trainer


def test_attention_maps_cover_the_patch_grid(tiny, rng):
    tr = Trainer(tiny())
    maps = attention_maps(tr.encoder, rng.uniform(size=(3, 16, 16, 3)), tr.config.augmentation())
    assert maps.shape == (3, 2, 4, 4)
    np.testing.assert_allclose(maps.sum(axis=(2, 3)), 1.0, atol=1e-12)


def test_triptych_layout(rng):
    img = rng.uniform(size=(4, 5, 3))
    rec = rng.uniform(size=(4, 5, 3))
    t = triptych(img, rec)
    assert t.shape == (4, 3 * 5 + 2, 3)
    assert np.array_equal(t[:, :5], img) and (t[:, 5] == 1.0).all() and (t[:, 11] == 1.0).all()
    np.testing.assert_array_equal(t[:, 12:], np.abs(rec - img))


def test_dump_writes_everything(tiny, tmp_path):
    tr = Trainer(tiny())
    images, labels = synthetic_shapes(10, 0, 16)
    written = dump_diagnostics(tr, tmp_path / "out", images, labels, num_examples=3)
    assert len(written["attention"]) == 3 * 2
    assert len(written["reconstruction"]) == 3
    assert read_ppm(written["attention"][0]).shape == (4, 4, 3)
    assert read_ppm(written["reconstruction"][0]).shape == (16, 50, 3)
    with open(tmp_path / "out" / "embeddings.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:3] == ["id", "label", "e0"]
    assert len(rows) == 1 + 10
    assert [int(r[1]) for r in rows[1:]] == labels.tolist()


def test_dump_without_decoder_or_class_token(tiny, tmp_path):
    images, labels = synthetic_shapes(4, 0, 16)
    written = dump_diagnostics(Trainer(tiny(reconstruction=False, variant="hierarchical", taps=2)),
                               tmp_path, images, labels)
    assert not written["attention"] and not written["reconstruction"]
    assert written["embeddings"]


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_unwritable_directory(tiny, tmp_path):
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(0o500)
    try:
        with pytest.raises(PermissionError):
            dump_diagnostics(Trainer(tiny()), locked, *synthetic_shapes(2, 0, 16))
    finally:
        locked.chmod(0o700)


def test_output_path_that_is_a_file(tiny, tmp_path):
    (tmp_path / "f").write_text("x")
    with pytest.raises(PermissionError, match="cannot create"):
        dump_diagnostics(Trainer(tiny()), tmp_path / "f" / "sub", *synthetic_shapes(2, 0, 16))
