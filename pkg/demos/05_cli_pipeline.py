"""
The command-line pipeline end to end
====================================

Runs gen, train, eval and analyze through the CLI entry point in a scratch
directory and lists what each step wrote. A short training budget keeps it quick.
"""
import tempfile
from pathlib import Path

from dwcca.cli import main

configs = Path(__file__).resolve().parents[1] / "configs"

with tempfile.TemporaryDirectory() as tmp:
    out = Path(tmp)
    main(["gen", "--spec", "default", "--seed", "7", "--out", str(out)])
    main(["train", "--model", str(configs / "dense_dwcca.toml"), "--data", str(out / "data"),
          "--epochs", "10", "--lr", "1e-3", "--out", str(out)])
    main(["eval", str(out / "run"), "--test", str(out / "data" / "test_shifted.dwds"), "--calibrated"])
    for which in ("eigen", "knn", "pca"):
        main(["analyze", str(out / "run"), "--data", str(out / "data"), "--which", which, "--k", "1,5,15"])

    for p in sorted(out.rglob("*")):
        if p.is_file():
            print(p.relative_to(out))
    print((out / "run" / "manifest.txt").read_text().splitlines()[:4])
