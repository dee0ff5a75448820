"""Command-line pipeline: ``l2i <command> [--config FILE] [--set section.key=value ...]``.

Exit codes: 0 success, 1 runtime error, 2 usage error. Every command writes
a JSON manifest (config snapshot, seed, input and output hashes) next to its
outputs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, dsp, synthgen
from .classifier import ClassifierTrainConfig, evaluate_classifier, load_classifier, save_classifier, train_classifier
from .config import RunConfig, load_config
from .errors import ConfigError, L2IError
from .interpreter import (InterpretConfig, InterpreterTrainConfig, LossWeights, generate_interpretation,
                          load_interpreter, save_interpreter, train_interpreter)
from .metrics import (export_relevances, faithfulness_suite, format_report, interpreter_fidelity,
                      random_baseline_faithfulness, write_json)
from .nmf import build_training_matrix, infer_activations, load_dictionary, objective, save_dictionary, sparse_nmf
from .pipeline import dataset_spec, mel_config, nmf_config, staged_from_spectrograms, stft_config

log = logging.getLogger("l2i")

COMMANDS = ("gen-data", "ingest", "learn-dict", "train-classifier", "train-interpreter", "interpret",
            "corrupt", "evaluate", "export-relevances")


class UsageError(Exception):
    pass


# -- helpers --------------------------------------------------------------------------

def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _hash_paths(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_file():
            out[str(p)] = file_sha256(p)
        elif p.is_dir():
            for f in sorted(q for q in p.rglob("*") if q.is_file() and q.name != "manifest.json"):
                out[str(f)] = file_sha256(f)
    return out


def write_manifest(out: Path, command: str, cfg: RunConfig, argv, inputs=(), outputs=(), extra=None) -> Path:
    target = out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")
    doc = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "inputs": _hash_paths(inputs),
        "outputs": _hash_paths(outputs),
    }
    if extra:
        doc.update(extra)
    target.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return target


def _path(flag, fallback: str, name: str) -> Path:
    value = flag or fallback
    if not value:
        raise UsageError(f"missing --{name} (or paths.{name} in the config)")
    return Path(value)


def _existing(flag, fallback: str, name: str) -> Path:
    p = _path(flag, fallback, name)
    if not p.exists():
        raise ConfigError(f"{name} path does not exist: {p}")
    return p


def _log_mags(samples, stft_cfg):
    return [dsp.log_magnitude(dsp.stft(s.signal, stft_cfg))[0] for s in samples]


def _models(args, cfg):
    clf = load_classifier(_existing(args.classifier, cfg.paths.classifier, "classifier"))
    w, _ = load_dictionary(_existing(args.dictionary, cfg.paths.dictionary, "dictionary"))
    interp = load_interpreter(_existing(args.interpreter, cfg.paths.interpreter, "interpreter"), w)
    return clf, interp


def _split(ds, which: str):
    return {"train": ds.train, "test": ds.test, "all": ds.train + ds.test}[which]


# -- commands -----------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    out = _path(args.out, cfg.paths.out, "out")
    ds = synthgen.generate_dataset(dataset_spec(cfg, args.preset))
    synthgen.write_dataset(ds, out)
    print(f"wrote {len(ds.train)} train / {len(ds.test)} test clips to {out}")
    return out, [], [out]


def cmd_ingest(args, cfg):
    out = _path(args.out, cfg.paths.out, "out")
    ds = synthgen.ingest_wav_folder(args.audio_dir, args.labels, args.mode)
    synthgen.write_dataset(ds, out)
    print(f"ingested {len(ds.train)} train / {len(ds.test)} test clips into {out}")
    return out, [args.audio_dir, args.labels], [out]


def cmd_learn_dict(args, cfg):
    data = _existing(args.data, cfg.paths.data, "data")
    out = _path(args.out, cfg.paths.dictionary, "out")
    ds = synthgen.read_dataset(data)
    stft_cfg = stft_config(cfg)
    xs = _log_mags(ds.train, stft_cfg)
    meta = {"sample_rate": ds.sample_rate, "stft": {"fft_size": stft_cfg.fft_size, "hop": stft_cfg.hop},
            "chunk": cfg.nmf.chunk, "mu": cfg.nmf.mu}
    if args.sweep_k:
        ks = [int(k) for k in args.sweep_k.split(",") if k.strip()]
        out.mkdir(parents=True, exist_ok=True)
        xt = build_training_matrix(xs, cfg.nmf.chunk)
        x_test = np.concatenate(_log_mags(ds.test, stft_cfg), axis=1) if ds.test else None
        rows = []
        for k in ks:
            res = sparse_nmf(xt, nmf_config(cfg, k))
            row = {"k": k, "train_objective": res.objective_trace[-1], "iterations": len(res.objective_trace) - 1}
            if x_test is not None:
                h = infer_activations(x_test, res.dictionary, nmf_config(cfg, k))
                row["test_objective"] = objective(x_test, res.dictionary.w, h, cfg.nmf.mu)
            rows.append(row)
            save_dictionary(res.dictionary, out / f"dict_k{k}.l2im", {**meta, "k": k})
        (out / "sweep.json").write_text(json.dumps(rows, indent=2))
        print(f"{'K':>6}  {'train objective':>16}  {'test objective':>16}")
        for r in rows:
            print(f"{r['k']:>6}  {r['train_objective']:>16.4f}  {r.get('test_objective', float('nan')):>16.4f}")
        return out, [data], [out]
    if args.staged:
        w = staged_from_spectrograms(xs, ds.train, ds.class_names, cfg)
        trace_final = None
    else:
        res = sparse_nmf(build_training_matrix(xs, cfg.nmf.chunk), nmf_config(cfg))
        w, trace_final = res.dictionary, res.objective_trace[-1]
    save_dictionary(w, out, {**meta, "k": w.k, "staged": bool(args.staged)})
    print(f"dictionary K={w.k} F={w.n_bins} written to {out}"
          + (f" (final objective {trace_final:.4f})" if trace_final is not None else ""))
    return out, [data], [out]


def cmd_train_classifier(args, cfg):
    data = _existing(args.data, cfg.paths.data, "data")
    out = _path(args.out, cfg.paths.classifier, "out")
    ds = synthgen.read_dataset(data)
    c = cfg.classifier
    tcfg = ClassifierTrainConfig(epochs=c.epochs, batch_size=c.batch_size, lr=c.lr,
                                 lr_halve_every=c.lr_halve_every, seed=cfg.seed)
    model, report = train_classifier(ds, tcfg, stft_config(cfg), mel_config(cfg))
    out.parent.mkdir(parents=True, exist_ok=True)
    save_classifier(model, out)
    report_path = out.with_name(out.name + ".report.json")
    report_path.write_text(json.dumps(report, indent=2))
    final = report["epochs"][-1] if report["epochs"] else {}
    print(f"classifier written to {out}; final epoch: {final}")
    return out, [data], [out, report_path]


def cmd_train_interpreter(args, cfg):
    data = _existing(args.data, cfg.paths.data, "data")
    clf_path = _existing(args.classifier, cfg.paths.classifier, "classifier")
    dict_path = _existing(args.dictionary, cfg.paths.dictionary, "dictionary")
    out = _path(args.out, cfg.paths.interpreter, "out")
    ds = synthgen.read_dataset(data)
    clf = load_classifier(clf_path)
    w, meta = load_dictionary(dict_path)
    i = cfg.interpreter
    tcfg = InterpreterTrainConfig(epochs=i.epochs, batch_size=i.batch_size, lr=i.lr, seed=cfg.seed,
                                  pooling=args.pooling or i.pooling, attention_dim=i.attention_dim)
    weights = LossWeights(i.alpha, i.beta, i.l1_per_frame)
    model, trace = train_interpreter(clf, ds, w, weights, tcfg, meta.get("sample_rate"))
    out.parent.mkdir(parents=True, exist_ok=True)
    save_interpreter(model, out)
    trace_path = out.with_name(out.name + ".trace.json")
    trace_path.write_text(json.dumps(trace, indent=2))
    print(f"interpreter ({tcfg.pooling}) written to {out}; final epoch: {trace[-1] if trace else {}}")
    return out, [data, clf_path, dict_path], [out, trace_path]


def cmd_interpret(args, cfg):
    clf, interp = _models(args, cfg)
    out = _path(args.out, cfg.paths.out, "out")
    out.mkdir(parents=True, exist_ok=True)
    icfg = InterpretConfig(tau=args.tau if args.tau is not None else cfg.interpret.tau,
                           emit_per_component=args.per_component)
    if args.input:
        items = [(Path(p).stem, dsp.load_wav(p)) for p in args.input]
        inputs = list(args.input)
    else:
        data = _existing(args.data, cfg.paths.data, "data")
        items = [(s.id, s.signal) for s in _split(synthgen.read_dataset(data), args.split)]
        inputs = [data]
    for sid, sig in items:
        res = generate_interpretation(sig, interp, clf, icfg, sid)
        dsp.save_wav(res.x_int, out / f"{sid}.int.wav")
        for k, xk in res.per_component.items():
            dsp.save_wav(xk, out / f"{sid}.k{k + 1:03d}.wav")
        c = res.relevance.predicted_class
        doc = {"id": sid, "predicted_class": c, "predicted_name": clf.class_names[c],
               "classifier_probs": res.classifier_probs.tolist(),
               "interpreter_probs": res.interpreter_probs.tolist(),
               "tau": icfg.tau, "selected": [k + 1 for k in res.selected],
               "relevance": res.relevance.r.tolist(), "degenerate": res.relevance.degenerate,
               "empty_selection": res.empty_selection}
        (out / f"{sid}.json").write_text(json.dumps(doc, indent=2))
    print(f"interpreted {len(items)} clips into {out}")
    return out, inputs, [out]


def cmd_corrupt(args, cfg):
    data = _existing(args.data, cfg.paths.data, "data")
    out = _path(args.out, cfg.paths.out, "out")
    ds = synthgen.read_dataset(data)
    if args.mode == "noise":
        test = [synthgen.corrupt_with_noise(s, args.snr, cfg.seed) for s in ds.test]
    else:
        test = []
        n = len(ds.test)
        for i, a in enumerate(ds.test):
            partner = next((ds.test[(i + j) % n] for j in range(1, n)
                            if not np.array_equal(ds.test[(i + j) % n].label, a.label)), None)
            if partner is None:
                raise ConfigError("mixing needs at least two differently labelled test clips")
            pa = float(np.mean(a.signal.samples ** 2))
            pb = float(np.mean(partner.signal.samples ** 2))
            gain = np.sqrt(pa / (pb * 10 ** (args.snr / 10.0))) if pb > 0 else 0.0
            test.append(synthgen.corrupt_with_mix(a, partner, gain))
    corrupted = synthgen.Dataset(ds.train, test, ds.class_names, ds.mode, ds.bands)
    synthgen.write_dataset(corrupted, out)
    print(f"wrote {len(test)} corrupted test clips ({args.mode}, {args.snr:g} dB) to {out}")
    return out, [data], [out]


def cmd_evaluate(args, cfg):
    data = _existing(args.data, cfg.paths.data, "data")
    clf, interp = _models(args, cfg)
    out = _path(args.out, cfg.paths.out, "out")
    out.mkdir(parents=True, exist_ok=True)
    samples = _split(synthgen.read_dataset(data), args.split)
    tau = args.tau if args.tau is not None else cfg.interpret.tau
    written = []
    summary = {"classifier": evaluate_classifier(clf, samples)}
    if args.suite in ("fidelity", "all"):
        fid = interpreter_fidelity(samples, clf, interp)
        write_json(fid, out / "fidelity.json")
        written.append(out / "fidelity.json")
        print("fidelity\n" + format_report(fid))
    if args.suite in ("faithfulness", "all"):
        ff = faithfulness_suite(samples, clf, interp, tau)
        if args.baseline == "random":
            ff.baseline = random_baseline_faithfulness(samples, clf, interp, tau, cfg.seed, reference=ff)
        write_json(ff, out / "faithfulness.json")
        written.append(out / "faithfulness.json")
        print("faithfulness\n" + format_report(ff))
    (out / "classifier.json").write_text(json.dumps(summary, indent=2))
    written.append(out / "classifier.json")
    return out, [data], written


def cmd_export_relevances(args, cfg):
    data = _existing(args.data, cfg.paths.data, "data")
    clf, interp = _models(args, cfg)
    out = _path(args.out, cfg.paths.out, "out")
    out.parent.mkdir(parents=True, exist_ok=True)
    samples = _split(synthgen.read_dataset(data), args.split)
    export_relevances(samples, clf, interp, out)
    print(f"relevance vectors for {len(samples)} clips written to {out}")
    return out, [data], [out]


HANDLERS = {
    "gen-data": cmd_gen_data, "ingest": cmd_ingest, "learn-dict": cmd_learn_dict,
    "train-classifier": cmd_train_classifier, "train-interpreter": cmd_train_interpreter,
    "interpret": cmd_interpret, "corrupt": cmd_corrupt, "evaluate": cmd_evaluate,
    "export-relevances": cmd_export_relevances,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("--out", help="output file or directory")

    models = argparse.ArgumentParser(add_help=False)
    models.add_argument("--classifier")
    models.add_argument("--dictionary")
    models.add_argument("--interpreter")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset directory (as written by gen-data or ingest)")

    split = argparse.ArgumentParser(add_help=False)
    split.add_argument("--split", choices=("train", "test", "all"), default="test")

    p = argparse.ArgumentParser(prog="l2i", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("gen-data", parents=[common], help="generate a synthetic corpus")
    s.add_argument("--preset", choices=sorted(synthgen.PRESETS))

    s = sub.add_parser("ingest", parents=[common], help="import a labelled WAV folder")
    s.add_argument("--audio-dir", required=True)
    s.add_argument("--labels", required=True, help="CSV with filename, split, label (';'-separated)")
    s.add_argument("--mode", choices=synthgen.MODES, default="MultiClass")

    s = sub.add_parser("learn-dict", parents=[common, data], help="learn the sparse-NMF dictionary")
    s.add_argument("--staged", action="store_true", help="noise block first, then per-class blocks")
    s.add_argument("--sweep-k", help="comma-separated K values; writes one dictionary per K")

    sub.add_parser("train-classifier", parents=[common, data], help="train the CNN classifier")

    s = sub.add_parser("train-interpreter", parents=[common, data, models], help="train the interpreter")
    s.add_argument("--pooling", choices=("att", "max"))

    s = sub.add_parser("interpret", parents=[common, data, models, split], help="generate interpretations")
    s.add_argument("--tau", type=float)
    s.add_argument("--per-component", action="store_true")
    s.add_argument("--input", nargs="+", help="WAV files to interpret instead of a dataset split")

    s = sub.add_parser("corrupt", parents=[common, data], help="corrupt the test split")
    s.add_argument("--mode", choices=("noise", "mix"), default="noise")
    s.add_argument("--snr", type=float, default=0.0, help="dB of signal over added noise or mixed clip")

    s = sub.add_parser("evaluate", parents=[common, data, models, split], help="fidelity and faithfulness")
    s.add_argument("--suite", choices=("fidelity", "faithfulness", "all"), default="all")
    s.add_argument("--baseline", choices=("random",))
    s.add_argument("--tau", type=float)

    sub.add_parser("export-relevances", parents=[common, data, models, split],
                   help="CSV of relevance vectors")
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        out, inputs, outputs = HANDLERS[args.command](args, cfg)
        write_manifest(Path(out), args.command, cfg, argv, inputs, outputs)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"l2i: error: {exc}", file=sys.stderr)
        return 2
    except (L2IError, ValueError, OSError, KeyError) as exc:
        print(f"l2i: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
