"""
The command-line pipeline
=========================

synth -> train -> register -> evaluate -> field-stats on a small 16^3 pair,
driven through the same entry point as the ``pyramidreg`` console script.
"""
import json
import sys
import tempfile
from pathlib import Path

from pyramidreg.harness.cli import main

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="pyramidreg-"))
config = work / "train.json"
work.mkdir(parents=True, exist_ok=True)
config.write_text(json.dumps({"dims": [16, 16, 16], "window": 5, "checkpoint_every": 5}))


def run(*argv):
    argv = [str(a) for a in argv]
    print("$ pyramidreg", " ".join(argv))
    code = main(argv)
    if code:
        sys.exit(code)


run("synth", "--seed", 1, "--dims", 16, 16, 16, "--deform-max", 3, "--deform-sigma", 4, "--out", work / "pair")
run("train", "--pair", work / "pair", "--preset", "desk", "--epochs", 10, "--config", config,
    "--deterministic", "--out", work / "run")
run("register", "--checkpoint", work / "run" / "ckpt_0009.json", "--fixed", work / "pair" / "fixed.json",
    "--moving", work / "pair" / "moving.json", "--out", work / "reg")
run("evaluate", "--phi", work / "reg" / "phi.json", "--pair", work / "pair", "--out", work / "eval")
run("field-stats", "--phi", work / "reg" / "phi.json")
print("outputs in", work)
