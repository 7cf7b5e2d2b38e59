"""
Features of one synthetic utterance
===================================

Render a neutral and an angry version of the same sentence, then look at
what the feature pipeline sees: log-mel frames, the F0 contour and the
low-order cepstrum.
"""

import numpy as np

from sfevc import signal as sig
from sfevc.synthcorpus import CorpusConfig, SyntheticFactors, draw_emotions, draw_sentences, draw_speakers
from sfevc.synthcorpus import f0_track, generate_utterance

# one speaker, one sentence, the four corpus emotions
rng = np.random.default_rng(0)
cfg = CorpusConfig(speakers=1, sentences=1)
speaker = draw_speakers(cfg, rng)[0]
sentence = draw_sentences(cfg, rng)[0]
emotions = draw_emotions(cfg, rng)

for name in ("neutral", "angry"):
    factors = SyntheticFactors(**sentence, **speaker, **emotions[name])
    wave, _ = generate_utterance(factors, seed=1)
    mel, contour, mcep = sig.analyze(wave)
    print(f"{name}: {len(wave.samples) / wave.sample_rate:.2f} s, {mel.shape[0]} frames x {mel.shape[1]} mel bins")

    # the tracker should follow the generator's own contour
    want, voiced = f0_track(factors)
    both = voiced & contour.voiced
    err = np.abs(contour.f0[both] - want[both])
    print(f"  F0 median {np.median(contour.f0[contour.voiced]):.1f} Hz, "
          f"median tracking error {np.median(err):.2f} Hz over {both.sum()} frames")

    # the first cepstral coefficients carry the coarse spectral shape
    print("  mean mcep[1:4]:", np.round(mcep.mean(axis=0)[:3], 3))

# Griffin-Lim turns a log-mel matrix back into audio
back = sig.griffin_lim(mel, iters=60, is_mel=True)
print(f"Griffin-Lim resynthesis: {len(back.samples)} samples")
