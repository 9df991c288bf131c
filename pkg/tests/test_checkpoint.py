import numpy as np
import pytest

from pshape.checkpoint import (
    MAGIC,
    load_checkpoint,
    read_header,
    save_checkpoint,
    serialize,
)
from pshape.exceptions import ConfigurationError, CorruptCheckpointError
from tests import random_cloud, tiny_architecture, tiny_model


@pytest.fixture
def saved(tmp_path):
    model = tiny_model("generative", m=2)
    model.set_references([random_cloud(99)])
    path = save_checkpoint(model, tmp_path / "model.psaf", epoch=4)
    return model, path


class TestSaveCheckpoint:
    def test_startsWithMagic(self, saved):
        _, path = saved
        assert path.read_bytes()[:4] == MAGIC

    def test_noPartialFileLeft(self, saved):
        _, path = saved
        assert [p.name for p in path.parent.iterdir()] == ["model.psaf"]

    def test_headerRecordsArchitectureAndEpoch(self, saved):
        model, path = saved
        header = read_header(path)
        assert header["epoch"] == 4
        assert header["kind"] == "generative"
        assert header["architecture"] == model.architecture.to_dict()
        assert header["parameters"][0]["name"] == model.parameters()[0].name

    def test_sameModel_identicalBytes(self):
        assert serialize(tiny_model()) == serialize(tiny_model())


class TestLoadCheckpoint:
    def test_roundTrip_identicalForward(self, saved):
        model, path = saved
        loaded = load_checkpoint(path)
        for seed in range(5):
            clouds = [random_cloud(seed)]
            expected = model.reconstruct(clouds, [1, 0])
            actual = loaded.reconstruct(clouds, [1, 0])
            np.testing.assert_array_equal(actual[0], expected[0])

    def test_roundTrip_keepsReferences(self, saved):
        model, path = saved
        loaded = load_checkpoint(path)
        np.testing.assert_array_equal(
            loaded.references[0].value, model.references[0].value
        )

    def test_matchingArchitecture_accepted(self, saved):
        model, path = saved
        load_checkpoint(path, expected=model.architecture)

    def test_initSeedIsNotCompared(self, saved):
        _, path = saved
        requested = tiny_architecture("generative", m=2, init_seed=5)
        load_checkpoint(path, expected=requested)

    def test_headerMismatch_namesBothValues(self, saved):
        _, path = saved
        requested = tiny_architecture("generative", m=2, k=3)
        with pytest.raises(ConfigurationError, match="k=2.*k=3"):
            load_checkpoint(path, expected=requested)

    def test_truncatedFile_raisesCorruptCheckpointError(self, saved, tmp_path):
        _, path = saved
        truncated = tmp_path / "truncated.psaf"
        truncated.write_bytes(path.read_bytes()[:-20])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(truncated)

    def test_tinyFile_raisesCorruptCheckpointError(self, tmp_path):
        path = tmp_path / "tiny.psaf"
        path.write_bytes(b"PSAF")
        with pytest.raises(CorruptCheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_badMagic_raisesCorruptCheckpointError(self, saved, tmp_path):
        _, path = saved
        other = tmp_path / "other.psaf"
        other.write_bytes(b"NOPE" + path.read_bytes()[4:])
        with pytest.raises(CorruptCheckpointError, match="magic"):
            load_checkpoint(other)

    def test_flippedBlobByte_raisesCorruptCheckpointError(self, saved, tmp_path):
        _, path = saved
        data = bytearray(path.read_bytes())
        data[-10] ^= 0xFF
        flipped = tmp_path / "flipped.psaf"
        flipped.write_bytes(bytes(data))
        with pytest.raises(CorruptCheckpointError, match="checksum"):
            load_checkpoint(flipped)

    def test_unsupportedVersion_raisesCorruptCheckpointError(self, saved, tmp_path):
        _, path = saved
        data = bytearray(path.read_bytes())
        data[4] = 9
        other = tmp_path / "future.psaf"
        other.write_bytes(bytes(data))
        with pytest.raises(CorruptCheckpointError, match="version"):
            load_checkpoint(other)

    def test_corruptionIsADataError(self):
        assert CorruptCheckpointError.exit_code.value == 3
