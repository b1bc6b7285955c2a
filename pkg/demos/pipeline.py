"""Generate spring data, train a small model and evaluate it, end to end.

Run with ``python demos/pipeline.py [workdir]``. Uses the same command
line entry points as the ``graphphys`` tool with a reduced model and
budget, so it finishes in about a minute.
"""

import sys
import tempfile
from pathlib import Path

from graphphys import cli

CONFIG = """\
epochs = 20
samples_per_epoch = 200
hidden = 32
decoder_hidden = 32
"""


def main(workdir):
    root = Path(workdir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "demo.cfg").write_text(CONFIG, encoding="utf-8")
    steps = [
        ["generate", "--system", "spring2d", "--sims", "5", "--steps", "300", "--fps", "10",
         "--seed", "1", "--out", str(root / "data")],
        ["train", "--data", str(root / "data"), "--config", str(root / "demo.cfg"), "--out", str(root / "model")],
        ["eval", "--data", str(root / "data"), "--model", str(root / "model"), "--out", str(root / "eval")],
        ["inverse-sample", "--model", str(root / "model"), "--count", "200", "--out", str(root / "masses.csv")],
    ]
    for argv in steps:
        print(f"$ graphphys {' '.join(argv)}")
        code = cli.main(argv)
        if code:
            sys.exit(code)
    print(f"reports written to {root / 'eval'}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="graphphys-demo-"))
