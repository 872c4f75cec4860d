import zipfile

import numpy as np
import pytest

from dmmmen.checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from dmmmen.errors import SchemaError
from dmmmen.model import Hyperparameters
from dmmmen.sampler import continue_chain, run_chain
from dmmmen.target import generate_synthetic, recovery_spec

HP = Hyperparameters(J=4, K=2, burn_in=30, n_samples=6, thin=1, seed=3)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(recovery_spec(seed=1, n=150))[0]


def test_round_trip(tmp_path, data):
    ch = run_chain(data, HP)
    path = tmp_path / "c.bin"
    save_checkpoint(ch, path, extra={"class_tag": "1"})
    (back,), extra = load_checkpoint(path)
    assert extra == {"class_tag": "1"}
    assert back.hp == ch.hp
    for k in ch.samples:
        np.testing.assert_array_equal(back.samples[k], ch.samples[k])
    np.testing.assert_array_equal(back.loglik, ch.loglik)


def test_bytes_are_deterministic(data):
    a = checkpoint_bytes([run_chain(data, HP)])
    b = checkpoint_bytes([run_chain(data, HP)])
    assert a == b


def test_resume_after_reload_is_bitwise(tmp_path, data):
    short = run_chain(data, HP.with_overrides(n_samples=3))
    save_checkpoint(short, tmp_path / "s.bin")
    (loaded,), _ = load_checkpoint(tmp_path / "s.bin")
    resumed = continue_chain(loaded, data, 3)
    full = run_chain(data, HP)
    for k in full.samples:
        np.testing.assert_array_equal(resumed.samples[k], full.samples[k])


def test_bad_files(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"not a zip")
    with pytest.raises(SchemaError):
        load_checkpoint(p)
    with zipfile.ZipFile(p, "w") as zf:
        zf.writestr("meta.json", '{"format": "other"}')
    with pytest.raises(SchemaError):
        load_checkpoint(p)
    with zipfile.ZipFile(p, "w") as zf:
        zf.writestr("junk.txt", "")
    with pytest.raises(SchemaError):
        load_checkpoint(p)
