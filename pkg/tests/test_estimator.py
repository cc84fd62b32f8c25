import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from actiondiff import ClipExtractor, TripletVideoDiffusion
from actiondiff.codec import CodecConfig, VideoCodec
from actiondiff.data import SynthSpec, preprocess_video, synth_video


def test_clip_extractor_matches_functional_pipeline():
    videos = [synth_video(SynthSpec(num_segments=3, include_static=True), seed=s) for s in range(3)]
    ext = ClipExtractor()
    clips = ext.fit_transform(videos)
    expected = [c for v in videos for c in preprocess_video(v)]
    assert [(c.source, c.start) for c in clips] == [(c.source, c.start) for c in expected]
    assert ext.n_videos_seen_ == 3


def test_clip_extractor_params_and_validation():
    ext = ClipExtractor(cut_threshold=0.3)
    assert clone(ext).get_params()["cut_threshold"] == 0.3
    with pytest.raises(NotFittedError):
        ClipExtractor().transform([])
    with pytest.raises(ValueError):
        ClipExtractor(cut_threshold=2.0).fit([synth_video(SynthSpec(num_segments=2), seed=0)])


def test_diffusion_estimator_fit_predict_score(small_clips):
    est = TripletVideoDiffusion(iterations=3, learning_rate=1e-3, batch_size=4, steps=2,
                                codec=VideoCodec(CodecConfig()), seed=1)
    params = clone(est).get_params()
    assert params["iterations"] == 3 and params["conditioning"] == "learnable"
    with pytest.raises(NotFittedError):
        est.predict(np.zeros((1, 3, 32, 32)), [(0, 0, 0)])
    est.fit(small_clips[:16])
    assert est.loss_trace_.shape == (3,)
    first = np.stack([c.frames[0] for c in small_clips[:2]])
    out = est.predict(first, [c.common_triplet for c in small_clips[:2]])
    assert out.shape == (2, 7, 3, 32, 32)
    again = est.predict(first, [c.common_triplet for c in small_clips[:2]])
    assert out.tobytes() == again.tobytes()
    assert np.isfinite(est.score(small_clips[16:18]))


def test_diffusion_estimator_input_checks(small_clips):
    est = TripletVideoDiffusion(iterations=1, batch_size=2, steps=1, codec=VideoCodec(CodecConfig()))
    with pytest.raises(ValueError):
        est.fit([])
    est.fit(small_clips[:4])
    with pytest.raises(ValueError):
        est.predict(np.full((1, 3, 32, 32), 2.0), [(0, 0, 0)])
    with pytest.raises(ValueError):
        est.predict(np.zeros((2, 3, 32, 32)), [(0, 0, 0)])
    with pytest.raises(ValueError):
        est.predict(np.zeros((1, 3, 32, 32)), [(0, -1, 0)])
