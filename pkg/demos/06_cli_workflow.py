"""The operator workflow, end to end, through the command-line surface.

Trains a tiny model on synthetic texture, resumes it, evaluates it, draws a
sample grid, and runs the decoder-causality check — all via the same entry
points exposed by the installed ``vlae`` command.
"""

import tempfile
from pathlib import Path

from vlae import cli

TINY = [
    "--set", "data.kind=synth-texture", "--set", "data.height=6",
    "--set", "data.width=6", "--set", "data.n=48",
    "--set", "model.latent_dim=4", "--set", "model.flow_steps=1",
    "--set", "model.flow_hidden=8", "--set", "model.encoder_hidden=16",
    "--set", "model.decoder_layers=2", "--set", "model.decoder_filters=4",
    "--set", "run.batch=16", "--set", "run.checkpoint_every=5",
]

with tempfile.TemporaryDirectory() as tmp:
    run = Path(tmp) / "run"
    print("== train 10 steps ==")
    assert cli.main(["train", "--out", str(run), "--steps", "10",
                     "--seed", "5", *TINY]) == 0

    print("\n== resume to 20 ==")
    assert cli.main(["train", "--out", str(run), "--steps", "20",
                     "--seed", "5", "--resume", *TINY]) == 0

    print("\n== evaluate ==")
    report = Path(tmp) / "report.txt"
    assert cli.main(["eval", str(run / "ckpt" / "latest"), "--k", "8",
                     "--limit", "16", "--seed", "0", "--out", str(report)]) == 0

    print("== sample a grid ==")
    grid = Path(tmp) / "samples.pgm"
    assert cli.main(["sample", str(run / "ckpt" / "latest"), "-n", "6",
                     "--cols", "3", "--seed", "7", "--out", str(grid)]) == 0
    print("wrote", grid.read_bytes().split(b"\n", 2)[:2])

    print("\n== decoder causality check ==")
    assert cli.main(["rf-check", "--probe", "6",
                     "--set", "model.decoder_layers=2",
                     "--set", "model.decoder_filters=4",
                     "--set", "model.latent_dim=4"]) == 0
