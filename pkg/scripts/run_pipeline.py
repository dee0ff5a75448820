#!/usr/bin/env python3
"""Train a preset end to end and write models plus an evaluation report.

    python scripts/run_pipeline.py --config configs/toy4.ini --out runs/toy4
    python scripts/run_pipeline.py --config configs/toy-urban.ini --out runs/urban
"""
import argparse
import json
import logging
from pathlib import Path

import numpy as np

from l2i import dsp, metrics, synthgen
from l2i.classifier import save_classifier
from l2i.config import load_config, write_config
from l2i.interpreter import InterpretConfig, generate_interpretation, predict_prepared, save_interpreter
from l2i.nmf import save_dictionary
from l2i.pipeline import run_pipeline


def band_purity(result, pooling, samples, tau):
    bands = [result.dataset.bands[n] for n in result.dataset.class_names]
    out = []
    for s in samples:
        res = generate_interpretation(s.signal, result.interpreters[pooling], result.classifier,
                                      InterpretConfig(tau=tau))
        c = res.relevance.predicted_class
        if c == int(np.argmax(s.label)):
            out.append(dsp.band_energy_fraction(res.x_int, bands[c]))
    return np.asarray(out)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/toy4.ini")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--poolings", default="att,max")
    p.add_argument("--out", default="runs/latest")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    poolings = tuple(x for x in args.poolings.split(",") if x)
    res = run_pipeline(cfg, poolings)
    tau = cfg.interpret.tau

    write_config(cfg, out / "config.ini")
    save_classifier(res.classifier, out / "classifier.l2im")
    save_dictionary(res.dictionary, out / "dictionary.l2im", {"sample_rate": res.dataset.sample_rate})
    report = {"timings_s": res.timings, "classifier": res.classifier_report["epochs"][-1], "interpreters": {}}
    test = res.dataset.test
    for pooling, model in res.interpreters.items():
        save_interpreter(model, out / f"interpreter_{pooling}.l2im")
        f, g = predict_prepared(model, res.prepared_test)
        entry = {"trace": res.traces[pooling]}
        if res.dataset.mode == "MultiClass":
            entry["top_k"] = metrics.topk_fidelity(f, g, (1, 3))
            ff = metrics.faithfulness_suite(test, res.classifier, model, tau)
            rb = metrics.random_baseline_faithfulness(test, res.classifier, model, tau, cfg.seed, ff)
            entry["ff_median"], entry["random_ff_median"] = ff.ff_median, rb.ff_median
            if res.dataset.bands:
                clean = band_purity(res, pooling, test, tau)
                noisy = band_purity(res, pooling, [synthgen.corrupt_with_noise(s, 0.0, cfg.seed) for s in test], tau)
                entry["band_purity_share"] = float(np.mean(clean >= 0.6))
                entry["band_purity_share_0db"] = float(np.mean(noisy >= 0.6)) if noisy.size else None
        else:
            entry["fidelity"] = metrics.multilabel_fidelity(f, g).to_dict()
        report["interpreters"][pooling] = entry
        print(pooling, {k: v for k, v in entry.items() if k != "trace"})
    (out / "report.json").write_text(json.dumps(report, indent=2, default=float))
    print(f"report written to {out / 'report.json'}")


if __name__ == "__main__":
    main()
