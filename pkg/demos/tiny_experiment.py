"""
A complete experiment on a tiny corpus
======================================

Drive the command-line tool from Python: synthesise two speakers,
extract features, train the joint model and the four direction filters
for a couple of epochs, convert neutral speech to happy and evaluate.
Numbers from such a short run are only a smoke test.
"""

import json
import tempfile
from pathlib import Path

from sfevc.cli import main

config = """\
[run]
seed = 3
dir = run

[corpus]
speakers = 2
sentences = 3
holdout = 1

[model]
width_scale = 0.0625
decoder_hidden = 8

[train]
epochs = 2
filter_epochs = 1

[eval]
tsne_iters = 300
"""

work = Path(tempfile.mkdtemp())
path = work / "exp.ini"
path.write_text(config)
arg = ["--config", str(path)]

# corpus and feature cache
main(arg + ["synth"])
main(arg + ["extract"])

# joint stage first, then one filter per valence/arousal direction
for stage in ("joint", "arousal-up", "arousal-down", "valence-up", "valence-down"):
    main(arg + ["train", "--stage", stage])

# neutral -> happy goes through A-up then V-up
main(arg + ["convert", "--source", "spk0_neutral_002", "--source", "spk1_neutral_002", "--target-emotion", "happy"])
main(arg + ["eval"])

summary = json.loads((work / "run" / "reports" / "eval" / "summary.json").read_text())
print(json.dumps(summary["directions"], indent=2))
print("outputs in", work / "run")
