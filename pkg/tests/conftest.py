import pytest

from splatmark.codec import CodecConfig
from splatmark.decoder import DecoderConfig
from splatmark.encoders import EncoderConfig
from splatmark.pretrain import PretrainConfig, load_checkpoint, pretrain, save_checkpoint
from splatmark.sampler import SamplerConfig

TINY_ENCODER = EncoderConfig(text_dim=32, text_ff=64, text_layers=1, image_channels=(8, 16, 16))


def tiny_pretrain_config(epochs=3, K=64, seed=0):
    return PretrainConfig(
        codec=CodecConfig(L=8),
        decoder=DecoderConfig(L=8, d=16, phi_hidden=64, hidden=64, ff=32),
        sampler=SamplerConfig(K=K, epochs=epochs, freeze_epoch=max(epochs - 1, 0)),
        encoder=TINY_ENCODER,
        batch_size=32,
        seed=seed,
    )


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    """A briefly trained L=8 decoder with small surrogate encoders, loaded from disk."""
    path = tmp_path_factory.mktemp("ckpt") / "dec.npz"
    save_checkpoint(path, pretrain(tiny_pretrain_config()))
    return load_checkpoint(path)


ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def criterion():
    """Record and print one PASS/FAIL line, then assert it."""

    def check(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
