"""Train skills and a source policy at a small scale, then adapt to three wind levels.

    python demos/quickstart.py [--config demos/tiny.yaml] [--out runs/quickstart]
"""
import argparse
import json
from pathlib import Path

import torch

from skilladapt.config import load_config
from skilladapt.experiments import run_matrix


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config", default=str(Path(__file__).with_name("tiny.yaml")))
    p.add_argument("--out", default="runs/quickstart")
    args = p.parse_args()
    torch.set_num_threads(1)
    cfg = load_config(args.config)
    _, summary = run_matrix(cfg, args.out)
    for cell in summary:
        print(json.dumps({k: cell[k] for k in ("mode", "disparity", "mean_success_rate",
                                               "mean_normalized_return")}))


if __name__ == "__main__":
    main()
