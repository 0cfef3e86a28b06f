"""Command-line entry point: ``ontodg {synth,prune,train,eval,probe}``.

Exit codes: 0 success, 2 configuration or input error, 3 invariant
violation, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .embedding_flow import node_embeddings, read_embeddings, write_embeddings
from .experiments import prepare_records
from .metrics import TASK_METRICS, evaluate
from .neural.checkpoint import load_params, save_params
from .ontology import Hierarchy, HierarchyError, load_hierarchy
from .probe import domain_recovery_ami, format_probe_table, probe_report
from .pruning import (
    CoverageError,
    PrunedVocabulary,
    ScoreParams,
    SilhouetteUndefined,
    assign_domains,
    node_indicators,
    prune,
)
from .records import CONDITIONS, SchemaError, TaskSpec, load_dataset
from .siamese import (
    NumericAbort,
    SiameseModel,
    TrainConfig,
    discover_domains,
    embed_all,
    iterative_train,
    leaf_table_from_backbone,
    predict,
    train_backbone_only,
)
from .synth import ConfigError, SynthConfig, load_hidden, write_outputs

logger = logging.getLogger("ontodg")

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_NUMERIC = 0, 2, 3, 4
RUN_SCHEMA = 1


class CliError(Exception):
    def __init__(self, msg: str, code: int = EXIT_CONFIG):
        super().__init__(msg)
        self.code = code


# ---------------------------------------------------------------- manifest


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    input_hash: str
    started: str
    finished: str | None = None
    status: str = "running"
    version: str = __version__
    outputs: list = field(default_factory=list)

    def write(self, out_dir: Path) -> None:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def finish(self, out_dir: Path, status: str = "ok") -> None:
        self.finished = _now()
        self.status = status
        self.outputs = sorted(p.name for p in out_dir.iterdir() if p.is_file() and p.name != "manifest.json")
        self.write(out_dir)


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def content_hash(paths) -> str:
    """SHA-256 over (name, bytes) of the given files in sorted name order."""
    h = hashlib.sha256()
    for p in sorted(Path(x) for x in paths):
        h.update(p.name.encode("utf-8") + b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


def _start_run(out: Path, command: str, config: dict, seed, inputs) -> RunManifest:
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(command, config, seed, content_hash(inputs), _now())
    man.write(out)
    return man


# ---------------------------------------------------------------- config and data


def _read_json(path: str | Path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CliError(f"{p}: invalid JSON ({e})") from None
    if not isinstance(obj, dict):
        raise CliError(f"{p}: expected a JSON object")
    return obj


@dataclass
class RunConfig:
    """Training run settings: model hyper-parameters plus split controls."""

    train: TrainConfig
    cutoff_day: int | None = None
    split_seed: int | None = None
    task: TaskSpec | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        schema = d.pop("schema", RUN_SCHEMA)
        if schema != RUN_SCHEMA:
            raise CliError(f"unsupported run config schema {schema}")
        cutoff = d.pop("cutoff_day", None)
        split_seed = d.pop("split_seed", None)
        task = d.pop("task", None)
        try:
            tcfg = TrainConfig.from_dict(d)
            tspec = TaskSpec(**task) if task else None
        except (TypeError, ValueError) as e:
            raise CliError(f"invalid train config: {e}") from None
        return cls(tcfg, cutoff, split_seed, tspec)

    def to_dict(self) -> dict:
        out = {**self.train.to_dict(), "schema": RUN_SCHEMA}
        if self.cutoff_day is not None:
            out["cutoff_day"] = self.cutoff_day
        if self.split_seed is not None:
            out["split_seed"] = self.split_seed
        if self.task is not None:
            out["task"] = asdict(self.task)
        return out


@dataclass
class DataDir:
    path: Path
    h: Hierarchy
    records: list
    task: TaskSpec
    synth: SynthConfig | None

    @property
    def files(self) -> list[Path]:
        names = ("hierarchy.txt", "dataset.jsonl", "synth_config.json")
        return [self.path / n for n in names if (self.path / n).is_file()]


def load_data_dir(path: str | Path, task: TaskSpec | None = None) -> DataDir:
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"data directory not found: {p}")
    synth = SynthConfig.load(p / "synth_config.json") if (p / "synth_config.json").is_file() else None
    task = task or (synth.label_task if synth else TaskSpec())
    for name in ("hierarchy.txt", "dataset.jsonl"):
        if not (p / name).is_file():
            raise CliError(f"{p} lacks {name}")
    h = load_hierarchy(p / "hierarchy.txt")
    records = load_dataset(p / "dataset.jsonl", task)
    return DataDir(p, h, records, task, synth)


def _prepared(data: DataDir, rc: RunConfig):
    cutoff = rc.cutoff_day if rc.cutoff_day is not None else (data.synth.cutoff_day if data.synth else None)
    if cutoff is None:
        raise CliError("no cutoff_day in the run config and no synth_config.json in the data directory")
    split_seed = rc.split_seed if rc.split_seed is not None else rc.train.seed
    return prepare_records(data.h, data.records, cutoff, split_seed)


def _with_seed(rc: RunConfig, seed: int | None) -> RunConfig:
    if seed is None:
        return rc
    tcfg = TrainConfig.from_dict({**rc.train.to_dict(), "seed": seed})
    return RunConfig(tcfg, rc.cutoff_day, seed, rc.task)


# ---------------------------------------------------------------- trained runs


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _write_lookup(path: Path, h: Hierarchy, lookup) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id\t" + "\t".join(h.names[n] for n in lookup.vocab.nodes) + "\n")
        for pid, row in zip(lookup.row_ids, lookup.matrix):
            fh.write(pid + "\t" + "\t".join(str(int(b)) for b in row) + "\n")


@dataclass
class LoadedRun:
    rc: RunConfig
    model: SiameseModel
    vocab: dict
    keys: list


def load_run(run_dir: str | Path, data: DataDir) -> LoadedRun:
    run = Path(run_dir)
    for name in ("train_config.json", "model.ckpt", "vocab.json"):
        if not (run / name).is_file():
            raise CliError(f"run directory {run} lacks {name}")
    rc = RunConfig.from_dict(_read_json(run / "train_config.json"))
    meta = _read_json(run / "vocab.json")
    keys, vocab = meta["keys"], meta["vocab"]
    d = data.task.d
    model = SiameseModel([len(vocab[k]) for k in keys], d, rc.train)
    model.load_blocks(load_params(run / "model.ckpt"))
    index = {name: i for i, name in enumerate(data.h.names)}
    try:
        model.vocab = PrunedVocabulary(tuple(index[n] for n in meta["pruned"]))
    except KeyError as e:
        raise CliError(f"pruned node {e.args[0]!r} is not in the hierarchy") from None
    model.vocab.validate(data.h)
    return LoadedRun(rc, model, vocab, keys)


def _metric_table(rows: dict, kind: str) -> str:
    names = TASK_METRICS[kind]
    width = max(len(m) for m in rows) if rows else 6
    head = f"{'method':<{width}}  " + "  ".join(f"{n:>11}" for n in names)
    lines = [head, "-" * len(head)]
    for method, vals in rows.items():
        lines.append(f"{method:<{width}}  " + "  ".join(f"{vals[n]:>11.4f}" for n in names))
    return "\n".join(lines)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    if not Path(args.config).is_file():
        raise CliError(f"config file not found: {args.config}")
    cfg = SynthConfig.load(args.config)
    if args.seed is not None:
        cfg = SynthConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    out = Path(args.out_dir or args.out or ".")
    man = _start_run(out, "synth", cfg.to_dict(), cfg.seed, [args.config])
    paths = write_outputs(cfg, out, workers=max(1, args.threads or 1))
    man.finish(out)
    for k, p in paths.items():
        print(f"{k}: {p}")
    return EXIT_OK


def _prune_table(h: Hierarchy, table, params: ScoreParams, beam_width: int):
    res = prune(h, table, params, beam_width)
    lines = [f"{'node':<16} {'level':>5} {'S(n)':>9} {'pur':>8} {'cov':>8} {'dep':>8}"]
    for n in res.vocab.nodes:
        pur, cov, dep = node_indicators(h, table, n, params)
        lines.append(f"{h.names[n]:<16} {h.level[n]:>5} {res.scores[n]:>9.4f} {pur:>8.4f} {cov:>8.4f} {dep:>8.4f}")
    lines.append("")
    lines.append(f"candidates after bottom-up pass: {len(res.c0)}; flagged pairs: {len(res.flagged)}")
    lines.append(f"silhouette of unresolved candidates: {res.trace.baseline_score:.6f}")
    for parent, n_cand, best in res.trace.steps:
        lines.append(f"  resolve {h.names[parent]:<16} candidates={n_cand:<4} best silhouette={best:.6f}")
    lines.append(f"selected {len(res.vocab)} node(s), silhouette {res.trace.best_score:.6f}")
    return res, "\n".join(lines)


def cmd_prune(args) -> int:
    h = load_hierarchy(args.hierarchy)
    params = ScoreParams(args.alpha, args.purity_over)
    inputs = [args.hierarchy]
    if args.embeddings:
        table = read_embeddings(args.embeddings)
        if table.vectors.shape[0] != len(h):
            raise CliError(f"embedding table has {table.vectors.shape[0]} rows, hierarchy has {len(h)} nodes")
        inputs.append(args.embeddings)
    elif args.ckpt and args.data:
        data = load_data_dir(args.data)
        run = load_run(Path(args.ckpt), data)
        table = node_embeddings(
            h, leaf_table_from_backbone(run.model, run.vocab[CONDITIONS]), run.rc.train.hidden, args.threshold
        )
        inputs.append(Path(args.ckpt) / "model.ckpt")
    else:
        raise CliError("prune needs --embeddings, or --ckpt (a run directory) together with --data")
    _, text = _prune_table(h, table, params, args.beam_width)
    print(text)
    if args.out_dir or args.out:
        out = Path(args.out_dir or args.out)
        man = _start_run(out, "prune", {"alpha": args.alpha, "beam_width": args.beam_width}, None, inputs)
        (out / "prune_report.txt").write_text(text + "\n", encoding="utf-8")
        man.finish(out)
    return EXIT_OK


def cmd_train(args) -> int:
    rc = _with_seed(RunConfig.from_dict(_read_json(args.config)), args.seed)
    data = load_data_dir(args.data, rc.task)
    out = Path(args.out_dir or args.out or "run")
    man = _start_run(out, "train", rc.to_dict(), rc.train.seed, [args.config, *data.files])
    (out / "train_config.json").write_text(json.dumps(rc.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    prep = _prepared(data, rc)
    init = load_params(args.load_ckpt) if args.load_ckpt else None
    res = iterative_train(prep.train, prep.val, data.h, prep.vocab, rc.train, init=init)
    model = res.model
    h = data.h

    _write_jsonl(out / "metrics.jsonl", ({"split": "val", **row} for row in res.ledger))
    save_params(Path(args.save_ckpt) if args.save_ckpt else out / "model.ckpt", model.param_blocks())
    if args.save_ckpt and Path(args.save_ckpt).resolve() != (out / "model.ckpt").resolve():
        save_params(out / "model.ckpt", model.param_blocks())
    meta = {"keys": prep.keys, "vocab": prep.vocab, "pruned": [h.names[n] for n in model.vocab.nodes]}
    (out / "vocab.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    lookup = res.lookup
    _write_lookup(out / "lookup_M.tsv", h, lookup)

    M_val = assign_domains(h, model.vocab, prep.val.records).matrix.astype(float)
    yp, yh = predict(model, prep.val, M_val)
    _write_jsonl(
        out / "predictions.jsonl",
        ({"id": p.id, "split": "val", "score": yh[i].tolist(), "score_p": yp[i].tolist(), "target": prep.val.y[i].tolist()}
         for i, p in enumerate(prep.val.records)),
    )
    emb = embed_all(model, prep.train, lookup.matrix.astype(float))
    rows = probe_report(emb, prep.train.y, lookup.matrix, seed=rc.train.seed)
    probe_text = format_probe_table(rows)
    (out / "probe.txt").write_text(probe_text + "\n", encoding="utf-8")
    summary = {
        "best_val_auprc": res.best_val_auprc,
        "best_epoch": res.best_epoch,
        "vocab_size": len(model.vocab),
        "n_domains": lookup.n_domains,
    }
    if args.dump_embeddings:
        _, table = discover_domains(model, h, prep.vocab[CONDITIONS], rc.train)
        write_embeddings(out / "node_embeddings.bin", table)
        np.savez(out / "patient_embeddings.npz", ids=np.array([p.id for p in prep.train.records]), **emb)
    if args.domain_recovery_report:
        hidden_path = data.path / "hidden_domains.jsonl"
        if not hidden_path.is_file():
            raise CliError(f"--domain-recovery-report needs {hidden_path}")
        hidden = load_hidden(hidden_path)
        ami = domain_recovery_ami(lookup.matrix, [hidden[pid]["domain"] for pid in lookup.row_ids])
        (out / "domain_recovery.json").write_text(json.dumps({"ami": ami}, indent=2) + "\n", encoding="utf-8")
        summary["domain_recovery_ami"] = ami
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    man.finish(out)
    print(json.dumps(summary, sort_keys=True))
    print(probe_text)
    return EXIT_OK


def _read_jsonl(path: str | Path, what: str) -> list[dict]:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} file not found: {p}")
    rows = []
    with open(p, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise CliError(f"{p}:{lineno}: invalid JSON ({e})") from None
    if not rows:
        raise CliError(f"{p}: no {what} rows")
    return rows


def _load_predictions(path: str | Path, field_name: str, gold: str | Path | None = None):
    """Scores from ``path``; targets from the same rows or, with ``gold``, joined by ``id``."""
    rows = _read_jsonl(path, "predictions")
    truth = None
    if gold is not None:
        truth = {}
        for lineno, obj in enumerate(_read_jsonl(gold, "gold"), 1):
            if "id" not in obj or "target" not in obj:
                raise CliError(f"{gold}: row {lineno} needs 'id' and 'target'")
            truth[obj["id"]] = obj["target"]
    scores, targets = [], []
    for lineno, obj in enumerate(rows, 1):
        if field_name not in obj:
            raise CliError(f"{path}: row {lineno} has no '{field_name}'")
        if truth is None:
            if "target" not in obj:
                raise CliError(f"{path}: row {lineno} has no 'target' (pass --gold)")
            target = obj["target"]
        else:
            if obj.get("id") not in truth:
                raise CliError(f"{path}: row {lineno} id {obj.get('id')!r} missing from gold file")
            target = truth[obj["id"]]
        scores.append(np.atleast_1d(np.asarray(obj[field_name], dtype=float)))
        targets.append(np.atleast_1d(np.asarray(target, dtype=float)))
    return np.vstack(scores), np.vstack(targets)


def cmd_eval(args) -> int:
    if args.predictions:
        kind = args.task or "mortality"
        s, y = _load_predictions(args.predictions, args.field, args.gold)
        rows = {Path(args.predictions).stem: evaluate(s, y, kind)}
    else:
        if not (args.run and args.data):
            raise CliError("eval needs --predictions, or --run together with --data")
        data = load_data_dir(args.data)
        run = load_run(args.run, data)
        rc = _with_seed(run.rc, args.seed) if args.seed is not None else run.rc
        prep = _prepared(data, rc)
        kind = data.task.kind
        ev = prep.target_eval
        M_ev = assign_domains(data.h, run.model.vocab, ev.records).matrix.astype(float)
        yp, yh = predict(run.model, ev, M_ev)
        rows = {"udon (y_h)": evaluate(yh, ev.y, kind), "udon (y_p)": evaluate(yp, ev.y, kind)}
        if args.baselines:
            sizes = [len(prep.vocab[k]) for k in prep.keys]
            base = train_backbone_only(prep.train, prep.val, sizes, rc.train, tag="base")
            rows["base"] = evaluate(predict(base.model, ev)[0], ev.y, kind)
            orc = train_backbone_only(prep.target_train, prep.target_val, sizes, rc.train, tag="oracle")
            rows["oracle"] = evaluate(predict(orc.model, ev)[0], ev.y, kind)
    text = _metric_table(rows, kind)
    print(text)
    if args.out_dir or args.out:
        out = Path(args.out_dir or args.out)
        if args.predictions:
            inputs = [args.predictions] + ([args.gold] if args.gold else [])
        else:
            inputs = [Path(args.run) / "model.ckpt", *data.files]
        man = _start_run(out, "eval", {"baselines": bool(args.baselines), "task": kind}, args.seed, inputs)
        (out / "eval.txt").write_text(text + "\n", encoding="utf-8")
        (out / "eval.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        man.finish(out)
    return EXIT_OK


def cmd_probe(args) -> int:
    data = load_data_dir(args.data)
    run = load_run(args.run, data)
    prep = _prepared(data, run.rc)
    M = assign_domains(data.h, run.model.vocab, prep.train.records).matrix
    emb = embed_all(run.model, prep.train, M.astype(float))
    rows = probe_report(emb, prep.train.y, M, seed=run.rc.train.seed)
    text = format_probe_table(rows)
    print(text)
    if args.out_dir or args.out:
        out = Path(args.out_dir or args.out)
        man = _start_run(out, "probe", {}, run.rc.train.seed, [Path(args.run) / "model.ckpt", *data.files])
        (out / "probe.txt").write_text(text + "\n", encoding="utf-8")
        (out / "probe.json").write_text(
            json.dumps([asdict(r) for r in rows], indent=2) + "\n", encoding="utf-8"
        )
        man.finish(out)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ontodg", description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=None, help="override the seed of the config")
    ap.add_argument("--threads", type=int, default=None, help="cap BLAS threads and worker processes")
    ap.add_argument("--out", default=None, help="output directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic hierarchy and cohort")
    s.add_argument("--config", required=True)
    s.add_argument("--out", dest="out_dir", default=None)
    s.set_defaults(func=cmd_synth)

    p = sub.add_parser("prune", help="score and prune a hierarchy, printing the selection trace")
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--embeddings", help="binary node embedding table (as written by --dump-embeddings)")
    p.add_argument("--ckpt", help="trained run directory whose backbone supplies leaf embeddings")
    p.add_argument("--data", help="data directory (needed with --ckpt)")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--beam-width", type=int, default=8)
    p.add_argument("--threshold", type=float, default=0.9, help="LCA rectification threshold")
    p.add_argument("--purity-over", choices=("all", "leaves"), default="all")
    p.add_argument("--out", dest="out_dir", default=None)
    p.set_defaults(func=cmd_prune)

    t = sub.add_parser("train", help="iterative discovery and two-pathway training")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", dest="out_dir", default=None)
    t.add_argument("--save-ckpt", default=None, help="extra checkpoint path (model.ckpt is always written)")
    t.add_argument("--load-ckpt", default=None, help="warm-start backbone and decoders from a checkpoint")
    t.add_argument("--dump-embeddings", action="store_true")
    t.add_argument("--domain-recovery-report", action="store_true", help="score M against the hidden-domain sidecar")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics table for a run or a predictions file")
    e.add_argument("--run", default=None)
    e.add_argument("--data", default=None)
    e.add_argument("--baselines", action="store_true", help="also train the Base and Oracle ablations")
    e.add_argument("--predictions", "--pred", default=None, help="JSONL with 'score' (and 'target' unless --gold) per line")
    e.add_argument("--gold", default=None, help="JSONL with 'id' and 'target' per line, joined to --pred by id")
    e.add_argument("--field", default="score")
    e.add_argument("--task", choices=sorted(TASK_METRICS), default=None)
    e.add_argument("--out", dest="out_dir", default=None)
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("probe", help="linear-probe weight overlap of p, r~ and h")
    q.add_argument("--run", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--out", dest="out_dir", default=None)
    q.set_defaults(func=cmd_probe)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    limits = threadpool_limits(limits=args.threads) if args.threads else contextlib.nullcontext()
    try:
        with limits:
            return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ConfigError, SchemaError, HierarchyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CoverageError, SilhouetteUndefined) as e:
        print(f"invariant violated: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except NumericAbort as e:
        print(f"numeric abort: {e}\n{json.dumps(e.dump, default=str)}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
