"""Train a small model on a synthetic cohort and compare it with the oracle risk.

Run: python demos/train_and_evaluate.py [out_dir]
"""

import sys
from pathlib import Path

from cdesurv import pipeline
from cdesurv.config import RunConfig


def main(out: Path) -> None:
    cfg = RunConfig(n_patients=400, latent_dim=16, g_hidden="32", f_hidden="32,32", head_hidden="32", epochs=8)
    ws = pipeline.load_data(cfg)
    _, result = pipeline.cmd_train(cfg, out / "model", ws,
                                   progress=lambda r: print(f"epoch {r.epoch}  loss {r.loss:.3f}  val C {r.val_c_index:.3f}"))
    report = pipeline.cmd_evaluate(cfg, out / "model", ws)
    oracle = pipeline.cmd_evaluate(cfg, out / "oracle", ws, oracle=True)
    print(f"best epoch {result.best_epoch}")
    print(f"test C-index {report.c_index:.3f}  Brier {report.brier:.3f}  AUC {report.auc:.3f}")
    print(f"oracle C-index {oracle.c_index:.3f}")
    print(f"artifacts in {out / 'model'}")


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "demo_runs/train_and_evaluate"))
