"""Generate a small dataset, pre-train SPAUNet, then continue with SSL strategy 3.

Runs in about a minute with the tiny settings below. Swap ``TINY`` for
``{}`` to use the desk preset instead.
"""

import tempfile
from pathlib import Path

from floodbench.cli import Workspace, run_cell
from floodbench.config import resolve
from floodbench.data import SynthConfig, generate_synthetic, write_scene_dir

TINY = {"tile": 32, "train_stride": 16, "eval_stride": 32, "channels": (8, 16, 32, 64, 128),
        "epochs": 15, "ssl_epochs": 15, "batch_size": 8}


def main():
    root = Path(tempfile.mkdtemp()) / "data"
    manifest = write_scene_dir(root, generate_synthetic(SynthConfig(scenes=12, size=64), seed=0))
    print("dataset digest", manifest["digest"][:16])

    cfg = resolve(overrides={"data": str(root), "label_ratio": 0.2, **TINY})
    ws = Workspace(cfg)
    print(f"{len(ws.labeled)} labeled tiles, {len(ws.unlabeled)} unlabeled tiles")

    for strategy in (None, 3):
        out = run_cell(cfg.with_(strategy=strategy), ws)
        rep = out["reports"]
        name = "supervised" if strategy is None else f"strategy {strategy}"
        print(f"{name:<12} macro-F1 {rep['four_class'].macro_f1:.4f}  "
              f"binary kappa {rep['binary'].kappa:.4f}")
        for row in out["history"][-2:]:
            print(f"    {row['phase']:<10} epoch {row['epoch']}  L_s {row['L_s']:.4f}  L_kl {row['L_kl']:.2e}")


if __name__ == "__main__":
    main()
