"""``deltanet`` command line: synth, train, generate, evaluate, retrieve, gradcheck, experiment.

Every command accepts ``--config FILE`` pointing at a JSON object whose keys
are the command's option names (dashes or underscores). Values resolve as
command-line flag, then config file, then built-in default.

Failures exit non-zero and print one JSON object on stderr::

    {"error": "<category>", "message": "..."}

Categories and exit codes: usage 2, config 3, missing_artifact 4, data 5,
divergence 6, check_failed 7, internal 1.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

__all__ = ["main", "CliError", "resolve_options", "config_fingerprint", "COMMANDS"]

log = logging.getLogger("deltanet")

EXIT_CODES = {"internal": 1, "usage": 2, "config": 3, "missing_artifact": 4, "data": 5,
              "divergence": 6, "check_failed": 7}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        if category not in EXIT_CODES:
            raise ValueError(f"unknown error category {category!r}")
        super().__init__(message)
        self.category = category

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.category]


def _floats(text):
    return [float(x) for x in str(text).split(",")] if isinstance(text, str) else list(text)


def _ints(text):
    return [int(x) for x in str(text).split(",")] if isinstance(text, str) else [int(x) for x in text]


def _strs(text):
    return [x for x in str(text).split(",") if x] if isinstance(text, str) else list(text)


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# name -> (type, default, help). ``None`` defaults with ``required`` in help are checked later.
_MODEL_OPTS = {
    "mode": (str, "delta1", "basic | delta1 | deltaL"),
    "variant": (str, "full", "full | image | report | image_report"),
    "dim": (int, 64, "feature width D"),
    "positions": (int, 16, "visual positions K (a square)"),
    "heads": (int, 4, "attention heads"),
    "conditions": (int, 3, "conditions L used by deltaL"),
    "conv_channels": (_ints, [8, 16, 16], "channels per conv stage, comma separated"),
    "gate_bias": (str, "shared", "shared | per_index"),
    "dtype": (str, "float64", "float64 | float32"),
}

COMMANDS = {
    "synth": {
        "out": (str, None, "manifest path to write (required)"),
        "patients": (int, 300, "number of patients"),
        "visit_probs": (_floats, [0.4, 0.2, 0.2, 0.2], "P(1 visit), P(2 visits), ..."),
        "severity_probs": (_floats, [0.5, 0.3, 0.2], "probability of each severity level"),
        "change_prob": (float, 0.3, "per-finding change probability between visits"),
        "mutation": (str, "switch", "switch | resample"),
        "image_size": (int, 32, "image side in pixels"),
        "lesion_amplitude": (float, 0.5, "intensity added per severity level"),
        "anatomy_amplitude": (float, 0.6, "scale of the patient-specific background"),
        "region_baseline": (float, 0.0, "patient baseline under each finding, in lesion units"),
        "noise": (float, 0.05, "pixel noise standard deviation"),
        "seed": (int, 0, "generator seed"),
    },
    "train": {
        "manifest": (str, None, "input manifest (required)"),
        "out_dir": (str, None, "directory for checkpoint, index and log (required)"),
        **_MODEL_OPTS,
        "source": (str, "mixed", "condition source: self | others | mixed"),
        "targets": (str, "all", "all | with_history | latest_multi"),
        "include_priors": (_bool, False, "also train on the prior exams of history targets"),
        "top_up": (_bool, False, "fill short histories with retrieved exams instead of empty slots"),
        "provider": (str, "pixel", "retrieval features: pixel | encoder"),
        "lr": (float, 5e-4, "Adam learning rate"),
        "batch_size": (int, 32, "mini-batch size"),
        "epochs": (int, 100, "maximum epochs"),
        "patience": (int, 10, "early-stopping patience in epochs"),
        "seed": (int, 0, "initialisation and shuffling seed"),
        "split_seed": (int, 0, "patient split seed"),
    },
    "generate": {
        "checkpoint": (str, None, "trained checkpoint (required)"),
        "manifest": (str, None, "manifest holding the query exams (required)"),
        "out": (str, None, "JSON-lines output (required)"),
        "index": (str, None, "feature index (default: index.dnix next to the checkpoint)"),
        "split": (str, "test", "train | val | test | all"),
        "strategy": (str, "greedy", "greedy | beam"),
        "beam_width": (int, 3, "beam width"),
        "limit": (int, 0, "stop after this many exams (0 = all)"),
        "traces": (_bool, True, "include per-step attention traces"),
    },
    "evaluate": {
        "candidates": (str, None, "generated reports: .jsonl from generate, or one report per line"),
        "references": (str, None, "reference reports, one per line (with a plain-text candidate file)"),
        "manifest": (str, None, "manifest supplying references for .jsonl candidates"),
        "out": (str, None, "evaluation report path (required)"),
    },
    "retrieve": {
        "manifest": (str, None, "input manifest (required)"),
        "out": (str, None, "JSON dump path (required)"),
        "index": (str, None, "existing index; built from the training split when omitted"),
        "index_out": (str, None, "also save the built index here"),
        "k": (int, 3, "neighbours per query"),
        "split": (str, "test", "query split: train | val | test | all"),
        "provider": (str, "pixel", "pixel | encoder"),
        "split_seed": (int, 0, "patient split seed"),
        "seed": (int, 0, "encoder seed for the encoder provider"),
        "same_patient": (_bool, False, "allow results from the query's own patient"),
    },
    "gradcheck": {
        **_MODEL_OPTS,
        "mode": (str, "deltaL", "basic | delta1 | deltaL"),
        "tokens": (int, 3, "target words"),
        "vocab": (int, 20, "vocabulary size"),
        "cond_len": (int, 6, "conditional report length"),
        "max_entries": (int, 12, "entries checked per parameter (0 = all)"),
        "tolerance": (float, 1e-4, "maximum relative error"),
        "epsilon": (float, 1e-4, "finite-difference step"),
        "seed": (int, 0, "seed"),
        "out": (str, None, "optional JSON report path"),
    },
    "experiment": {
        "preset": (str, None, "modes | self_vs_others | ablation (required)"),
        "seeds": (_ints, None, "seeds (default: the preset's)"),
        "arms": (_strs, None, "subset of arms"),
        "epochs": (int, None, "override the preset's epoch budget"),
        "out": (str, None, "JSON summary path (required)"),
    },
}

REQUIRED = {
    "synth": ("out",), "train": ("manifest", "out_dir"), "generate": ("checkpoint", "manifest", "out"),
    "evaluate": ("candidates", "out"), "retrieve": ("manifest", "out"), "gradcheck": (),
    "experiment": ("preset", "out"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deltanet", description="Conditional report generation on synthetic exams.")
    parser.add_argument("--log-level", default="WARNING", help="logging level for stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name, help=(globals()[f"cmd_{name}"].__doc__ or "").strip().split("\n")[0])
        p.add_argument("--config", default=None, help="JSON config file")
        for key, (typ, default, text) in opts.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                           type=str if typ in (_floats, _ints, _strs, _bool) else typ,
                           help=f"{text} [default: {default}]")
    return parser


def resolve_options(command: str, flags: dict, config_path: str | None = None) -> dict:
    """Merge defaults, config file and flags (flags win)."""
    table = COMMANDS[command]
    out = {k: v[1] for k, v in table.items()}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise CliError("missing_artifact", f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CliError("config", f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(data, dict):
            raise CliError("config", f"{path}: expected a JSON object")
        data = {k.replace("-", "_"): v for k, v in data.items()}
        unknown = sorted(set(data) - set(table))
        if unknown:
            raise CliError("config", f"{path}: unknown keys for '{command}': {unknown}")
        out.update(data)
    out.update({k: v for k, v in flags.items() if k in table and v is not None})
    for key, (typ, _, _) in table.items():
        if out[key] is None:
            continue
        try:
            out[key] = typ(out[key])
        except (TypeError, ValueError) as exc:
            raise CliError("config", f"option {key}: {exc}") from None
    missing = [k for k in REQUIRED[command] if out.get(k) is None]
    if missing:
        raise CliError("usage", f"{command}: missing required options {['--' + m.replace('_', '-') for m in missing]}")
    return out


def config_fingerprint(options: dict) -> str:
    return hashlib.sha256(json.dumps(options, sort_keys=True).encode()).hexdigest()[:16]


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError("missing_artifact", f"{what} not found: {p}")
    return p


def _numpy_scalar(x):
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"Object of type {type(x).__name__} is not JSON serializable")


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_numpy_scalar) + "\n")


def _load_records(path):
    from .corpus import ManifestError, load_manifest

    _require(path, "manifest")
    try:
        return load_manifest(path)
    except (ManifestError, FileNotFoundError) as exc:
        raise CliError("data", str(exc)) from None


def _split_records(records, split: str, split_seed: int):
    from .corpus import split_patients

    tr, va, te = split_patients(records, seed=split_seed)
    pats = {"train": tr, "val": va, "test": te}
    if split == "all":
        return records, tr
    if split not in pats:
        raise CliError("usage", f"split must be train, val, test or all, got {split!r}")
    return [r for r in records if r.patient_id in pats[split]], tr


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_synth(o: dict) -> dict:
    """Generate a synthetic multi-visit corpus and write its manifest."""
    from .corpus import SyntheticConfig, generate_synthetic, report_statistics, save_manifest

    try:
        cfg = SyntheticConfig(n_patients=o["patients"], visit_probs=tuple(o["visit_probs"]),
                              severity_probs=tuple(o["severity_probs"]), change_prob=o["change_prob"],
                              mutation=o["mutation"], image_size=o["image_size"],
                              lesion_amplitude=o["lesion_amplitude"],
                              anatomy_amplitude=o["anatomy_amplitude"],
                              region_baseline=o["region_baseline"], noise=o["noise"],
                              seed=o["seed"])
    except ValueError as exc:
        raise CliError("config", str(exc)) from None
    records = generate_synthetic(cfg)
    save_manifest(records, o["out"])
    stats = report_statistics(records)
    print(json.dumps(stats, indent=2))
    return stats


def _model_config(o: dict, vocab_size: int, cond_len: int, image_size: int, seed: int,
                  in_channels: int = 1):
    from .model import ModelConfig

    try:
        return ModelConfig(vocab_size=vocab_size, dim=o["dim"], positions=o["positions"],
                           heads=o["heads"], max_conditions=o["conditions"], cond_len=cond_len,
                           max_decode_len=cond_len, mode=o["mode"], seed=seed,
                           image_size=image_size, in_channels=in_channels, conv_channels=tuple(o["conv_channels"]),
                           variant=o["variant"], gate_bias=o["gate_bias"], dtype=o["dtype"])
    except ValueError as exc:
        raise CliError("config", str(exc)) from None


def _examples(records, targets, n_conditions, o, index, encoder, training):
    from .dataset import build_examples, select_targets

    chosen = select_targets(targets, o.get("targets", "all"), training,
                            o.get("include_priors", False) and training)
    try:
        return build_examples(chosen, records, n_conditions, o["source"], index,
                              require_full_history=o["source"] == "self", encoder=encoder,
                              top_up=o.get("top_up", False))
    except ValueError as exc:
        raise CliError("data", str(exc)) from None


def _encoder_for(o: dict, records, seed: int):
    """Frozen image encoder for the encoder retrieval provider."""
    if o["provider"] != "encoder":
        return None
    from .layers import ConvEncoder

    size = np.asarray(records[0].image).shape
    return ConvEncoder(size[0], size[-1], o.get("positions", 16), o.get("dim", 64),
                       np.random.default_rng([seed, 7]),
                       channels=tuple(o.get("conv_channels", (8, 16, 16))))


def cmd_train(o: dict) -> dict:
    """Train a model; writes the best-validation checkpoint, index and epoch log."""
    from .corpus import build_vocabulary, split_patients
    from .dataset import max_report_length
    from .model import DeltaNetModel, save_checkpoint
    from .retrieval import build_index
    from .training import TrainConfig, TrainingDiverged, fit

    records = _load_records(o["manifest"])
    out_dir = Path(o["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    fp = config_fingerprint(o)
    tr, va, te = split_patients(records, seed=o["split_seed"])
    train = [r for r in records if r.patient_id in tr]
    val = [r for r in records if r.patient_id in va]
    vocab = build_vocabulary([r.report for r in train])
    report_len = max_report_length(records)
    size = np.asarray(records[0].image).shape
    cfg = _model_config(o, len(vocab), report_len, size[-1], o["seed"], size[0])
    encoder = _encoder_for(o, records, o["seed"])
    index = build_index(train, tr, o["provider"], encoder)
    index.save(out_dir / "index.dnix")
    train_ex = _examples(records, train, cfg.n_conditions, o, index, encoder, True)
    val_ex = _examples(records, val, cfg.n_conditions, o, index, encoder, False)
    if not train_ex:
        raise CliError("data", "no training examples after target selection")
    model = DeltaNetModel(cfg)
    tcfg = TrainConfig(lr=o["lr"], batch_size=o["batch_size"], epochs=o["epochs"],
                       patience=o["patience"], seed=o["seed"])
    log_path = out_dir / "train_log.jsonl"
    with log_path.open("w") as fh:
        fh.write(json.dumps({"config_fingerprint": fp, "config": o,
                             "started": time.strftime("%Y-%m-%dT%H:%M:%S")}, sort_keys=True) + "\n")

        def on_epoch(entry):
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
            fh.flush()

        try:
            res = fit(model, train_ex, val_ex, vocab, tcfg, on_epoch=on_epoch)
        except TrainingDiverged as exc:
            fh.write(json.dumps({"diverged": str(exc)}) + "\n")
            raise CliError("divergence", str(exc)) from None
        fh.write(json.dumps({"best_epoch": res.best_epoch, "best_val_bleu4": res.best_bleu4,
                             "steps": res.steps, "stopped_early": res.stopped_early}) + "\n")
    extra = {"config_fingerprint": fp, "options": o, "index_fingerprint": index.fingerprint,
             "best_epoch": res.best_epoch}
    save_checkpoint(out_dir / "model.dnck", model, None, res.best_epoch, vocab.to_list(), extra)
    summary = {"checkpoint": str(out_dir / "model.dnck"), "best_epoch": res.best_epoch,
               "best_val_bleu4": round(res.best_bleu4, 4), "config_fingerprint": fp}
    print(json.dumps(summary, indent=2))
    return summary


def _compact_trace(trace) -> list:
    steps = []
    for t, tok in enumerate(trace.tokens):
        entry = {"token": tok, "logprob": round(trace.logprobs[t], 8)}
        for bank, w in trace.weights[t].items():
            entry[bank] = [round(float(x), 6) for x in w.mean(axis=0)]
        steps.append(entry)
    return steps


def cmd_generate(o: dict) -> dict:
    """Decode reports for a split of a manifest with a trained checkpoint."""
    from .corpus import Vocabulary
    from .dataset import pack_conditions
    from .model import load_checkpoint
    from .retrieval import FeatureIndex

    ckpt = _require(o["checkpoint"], "checkpoint")
    model, _, header = load_checkpoint(ckpt)
    train_opts = header["extra"].get("options", {})
    vocab = Vocabulary.from_list(header["vocab"])
    records = _load_records(o["manifest"])
    cfg = model.config
    index = encoder = None
    if cfg.conditional:
        index_path = _require(o["index"] or ckpt.parent / "index.dnix", "feature index")
        index = FeatureIndex.load(index_path)
        if index.fingerprint != header["extra"].get("index_fingerprint"):
            raise CliError("data", f"index {index_path} was not built for this checkpoint")
        encoder = _encoder_for(train_opts, records, train_opts.get("seed", 0))
    queries, _ = _split_records(records, o["split"], train_opts.get("split_seed", 0))
    opts = {k: train_opts.get(k, COMMANDS["train"][k][1]) for k in ("source", "targets", "top_up")}
    examples = _examples(records, queries, cfg.n_conditions, opts, index, encoder, False)
    if o["limit"]:
        examples = examples[:o["limit"]]
    lines = []
    for ex in examples:
        ci = cr = cm = None
        if cfg.conditional:
            ci, cr, cm = pack_conditions(ex.conditions, vocab, cfg.n_conditions, cfg.cond_len,
                                         np.asarray(ex.target.image).shape)
        tokens, trace = model.generate(ex.target.image, ci, cr, cm, o["strategy"], o["beam_width"])
        row = {"exam_id": ex.exam_id, "report": " ".join(vocab.decode(tokens)),
               "reference": " ".join(ex.target.report),
               "conditions": [[e.record.exam_id, e.provenance] for e in ex.conditions.entries]}
        if o["traces"]:
            row["trace"] = _compact_trace(trace)
        lines.append(json.dumps(row, sort_keys=True))
    Path(o["out"]).parent.mkdir(parents=True, exist_ok=True)
    Path(o["out"]).write_text("\n".join(lines) + ("\n" if lines else ""))
    summary = {"generated": len(lines), "out": o["out"]}
    print(json.dumps(summary))
    return summary


def _read_lines(path, what):
    return [line.split() for line in _require(path, what).read_text().splitlines()]


def cmd_evaluate(o: dict) -> dict:
    """Score generated reports and write the metric report."""
    from .corpus import labels_from_report
    from .metrics import evaluate_corpus, write_report

    cand_path = _require(o["candidates"], "candidates file")
    pred_labels = ref_labels = None
    if cand_path.suffix == ".jsonl":
        rows = [json.loads(line) for line in cand_path.read_text().splitlines() if line.strip()]
        cands = [r["report"].split() for r in rows]
        if o["manifest"]:
            lookup = {r.exam_id: r for r in _load_records(o["manifest"])}
            missing = [r["exam_id"] for r in rows if r["exam_id"] not in lookup]
            if missing:
                raise CliError("data", f"exams missing from the manifest: {missing[:5]}")
            refs = [list(lookup[r["exam_id"]].report) for r in rows]
            if all(lookup[r["exam_id"]].labels is not None for r in rows):
                pred_labels = [labels_from_report(c) for c in cands]
                ref_labels = [lookup[r["exam_id"]].labels for r in rows]
        elif all("reference" in r for r in rows):
            refs = [r["reference"].split() for r in rows]
        else:
            raise CliError("usage", "jsonl candidates need --manifest or embedded references")
    else:
        if not o["references"]:
            raise CliError("usage", "plain-text candidates need --references")
        cands = _read_lines(cand_path, "candidates file")
        refs = _read_lines(o["references"], "references file")
        if len(cands) != len(refs):
            raise CliError("data", f"{len(cands)} candidates but {len(refs)} references")
    if not cands:
        raise CliError("data", "no candidates to evaluate")
    report = evaluate_corpus(cands, refs, pred_labels, ref_labels, fingerprint=config_fingerprint(o))
    write_report(report, o["out"])
    d = report.as_dict()
    print(json.dumps(d, indent=2))
    return d


def cmd_retrieve(o: dict) -> dict:
    """Dump ranked training-set neighbours for each query exam."""
    from .retrieval import FeatureIndex, build_index, dump_retrievals

    records = _load_records(o["manifest"])
    queries, tr = _split_records(records, o["split"], o["split_seed"])
    encoder = _encoder_for(o, records, o["seed"])
    if o["index"]:
        index = FeatureIndex.load(_require(o["index"], "feature index"))
    else:
        index = build_index([r for r in records if r.patient_id in tr], tr, o["provider"], encoder)
        if o["index_out"]:
            index.save(o["index_out"])
    if index.provider == "encoder" and encoder is None:
        raise CliError("config", "index uses encoder features; pass --provider encoder")
    results = dump_retrievals(index, queries, o["k"], not o["same_patient"], encoder)
    _write_json(o["out"], {"index_fingerprint": index.fingerprint, "k": o["k"], "results": results})
    summary = {"queries": len(results), "out": o["out"]}
    print(json.dumps(summary))
    return summary


def cmd_gradcheck(o: dict) -> dict:
    """Finite-difference check of the full model's gradients."""
    from .diagnostics import gradcheck_model

    cfg = _model_config(o, o["vocab"], o["cond_len"], 32, o["seed"])
    cfg.max_decode_len = o["tokens"] + 2
    res = gradcheck_model(cfg, o["tokens"], o["max_entries"] or None, o["tolerance"], o["epsilon"],
                          o["seed"])
    r = res.report
    out = {"passed": bool(r.passed), "max_rel_error": r.max_rel_error, "tolerance": r.tolerance,
           "checked": r.checked, "per_param": r.per_param, "error": r.error,
           "seconds": round(res.seconds, 2)}
    print(r.summary())
    if o["out"]:
        _write_json(o["out"], out)
    if not r.passed:
        raise CliError("check_failed", f"gradient check failed: max relative error {r.max_rel_error:.3e}")
    return out


def cmd_experiment(o: dict) -> dict:
    """Run one of the comparison presets and write per-arm BLEU-4."""
    from dataclasses import replace

    from .experiments import PRESETS, run_experiment

    if o["preset"] not in PRESETS:
        raise CliError("usage", f"unknown preset {o['preset']!r}; choose from {sorted(PRESETS)}")
    preset = PRESETS[o["preset"]]
    if o["epochs"]:
        preset = replace(preset, train=replace(preset.train, epochs=o["epochs"]))
    try:
        res = run_experiment(preset, o["seeds"], o["arms"])
    except KeyError as exc:
        raise CliError("usage", str(exc.args[0])) from None
    out = {"preset": preset.name, "summary": res.summary(),
           "runs": [{"arm": r.arm, "seed": r.seed, "best_epoch": r.best_epoch,
                     "test": r.test.as_dict()} for r in res.runs]}
    _write_json(o["out"], out)
    print(json.dumps(out["summary"], indent=2))
    return out


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        if not args.command:
            raise CliError("usage", "no command given; choose one of " + ", ".join(COMMANDS))
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "log_level")}
        options = resolve_options(args.command, flags, args.config)
        globals()[f"cmd_{args.command}"](options)
        return 0
    except CliError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001 - last-resort reporting for the CLI
        log.debug("unhandled error", exc_info=True)
        print(json.dumps({"error": "internal", "message": f"{type(exc).__name__}: {exc}"}),
              file=sys.stderr)
        return EXIT_CODES["internal"]


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
