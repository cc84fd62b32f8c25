import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from actiondiff.codec import CodecConfig, VideoCodec, pretrain_codec  # noqa: E402
from actiondiff.data import SynthSpec, preprocess_video, synth_video  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture
def identity_codec():
    return VideoCodec(CodecConfig(f=1, latent_channels=4, identity_mode=True))


@pytest.fixture(scope="session")
def small_clips():
    """About forty valid clips from six short synthetic videos."""
    clips = []
    for s in range(6):
        spec = SynthSpec(num_segments=4, include_static=True, include_black=True)
        clips += preprocess_video(synth_video(spec, seed=s, name=f"v{s:02d}"))
    return clips


@pytest.fixture(scope="session")
def trained_codec():
    """Autoencoder fitted on frames from videos that never appear in evaluation sets."""
    frames = np.concatenate([synth_video(SynthSpec(num_segments=4), seed=1000 + s).frames for s in range(60)])
    codec, losses = pretrain_codec(frames, CodecConfig(), iters=1500, seed=0, batch_size=16)
    codec.pretrain_losses = losses
    return codec


ACCEPTANCE_RESULTS = {}


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_RESULTS


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, title, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
