#!/usr/bin/env python3
"""Dictionary-size sweep: sparse-NMF objective on train and test spectrograms per K.

    python scripts/sweep_k.py --ks 10,20,40,80 --preset toy4
"""
import argparse
import json
import time

import numpy as np

from l2i import dsp, synthgen
from l2i.config import load_config
from l2i.nmf import build_training_matrix, infer_activations, objective, sparse_nmf
from l2i.pipeline import dataset_spec, nmf_config, stft_config


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--preset")
    p.add_argument("--ks", default="10,20,40,80")
    p.add_argument("--json", help="write the rows here as well")
    args = p.parse_args()

    cfg = load_config(args.config, args.set)
    ds = synthgen.generate_dataset(dataset_spec(cfg, args.preset))
    stft_cfg = stft_config(cfg)

    def spectrograms(samples):
        return [dsp.log_magnitude(dsp.stft(s.signal, stft_cfg))[0] for s in samples]

    xt = build_training_matrix(spectrograms(ds.train), cfg.nmf.chunk)
    x_test = np.concatenate(spectrograms(ds.test), axis=1)
    rows = []
    print(f"{'K':>5} {'train obj/frame':>16} {'test obj/frame':>15} {'iters':>6} {'seconds':>8}")
    for k in (int(v) for v in args.ks.split(",") if v.strip()):
        t0 = time.perf_counter()
        res = sparse_nmf(xt, nmf_config(cfg, k))
        h = infer_activations(x_test, res.dictionary, nmf_config(cfg, k))
        row = {"k": k,
               "train_objective_per_frame": res.objective_trace[-1] / xt.x_train.shape[1],
               "test_objective_per_frame": objective(x_test, res.dictionary.w, h, cfg.nmf.mu) / x_test.shape[1],
               "iterations": len(res.objective_trace) - 1, "seconds": time.perf_counter() - t0}
        rows.append(row)
        print(f"{k:>5} {row['train_objective_per_frame']:>16.4f} {row['test_objective_per_frame']:>15.4f} "
              f"{row['iterations']:>6} {row['seconds']:>8.1f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
