"""Command-line entry point: gen, train, eval, sweep, probe.

Every command is deterministic given (config, seeds): reruns produce
byte-identical outputs. Each output file starts with a header comment
carrying the config hash, and the sweep refuses to mix results across
config hashes when resuming.

File formats (all plain text, diff-able):
  corpus.jsonl        one JSON ReportRecord per line
  splits.json         {"splits": {name: [report_id]}, "patient_split": {pid: name}}
  vocab.txt           one token per line; line number == token id
  metrics.csv         run_id,mode,epsilon,rank,seed,weighted_f1,f1_<label>...
  steps.jsonl         one DPStepReport JSON object per step
  privacy_report.txt  key: value block (see privacy.privacy_report)
  sweep_runs.csv      config_hash,mode,epsilon,rank,seed,weighted_f1
  sweep_summary.csv   config_hash,mode,epsilon,rank,mean_f1,std_f1,n_seeds
  probe_details.csv   model_tag,report_id,cosine
  probe_summary.csv   model_tag,mean,std,n,skipped
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import corpus as C
from . import model as M
from . import training as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigurationError, ContractError, DataError
from .metrics import MetricsReport
from .privacy import privacy_report
from .probe import run_probe

DEFAULT_EPSILONS = (0.01, 0.1, 1.0, 10.0)
DEFAULT_RANKS = (1, 2, 4, 8)


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _merged(args: argparse.Namespace, keys: list[str]) -> dict:
    """Config-file values overridden by explicitly passed flags."""
    base = _load_config_file(getattr(args, "config", None))
    out = dict(base)
    for key in keys:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def _require_new(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise ConfigurationError(f"{path} exists; pass --force to overwrite")


def _model_config(cfg: dict, vocab_size: int, n_labels: int) -> M.ModelConfig:
    return M.ModelConfig(
        vocab_size=vocab_size,
        max_seq_len=int(cfg.get("max_seq_len", 96)),
        d_model=int(cfg.get("d_model", 64)),
        n_heads=int(cfg.get("n_heads", 2)),
        n_layers=int(cfg.get("n_layers", 2)),
        d_ff=int(cfg.get("d_ff", 128)),
        n_labels=n_labels,
        dropout_rate=float(cfg.get("dropout_rate", 0.0)),
        head_trainable=bool(cfg.get("head_trainable", True)),
    )


def _settings(cfg: dict, mode: str, seed: int, epsilon: float | None,
              rank: int) -> T.TrainSettings:
    return T.TrainSettings(
        mode=mode,
        rank=rank,
        lora_scale=float(cfg.get("lora_scale", 1.0)),
        epsilon=epsilon,
        clip_norm=float(cfg.get("clip_norm", 1.0)),
        expected_batch=float(cfg.get("expected_batch", 64.0)),
        epochs=int(cfg.get("epochs", 10)),
        learning_rate=float(cfg.get("learning_rate",
                                    0.5 if mode == "full-ft" else 1.0)),
        head_lr_scale=float(cfg.get("head_lr_scale", 25.0)),
        adapter_lr_scale=float(cfg.get("adapter_lr_scale", 5.0)),
        mlm_weight=float(cfg.get("mlm_weight", 0.0)),
        mlm_fraction=float(cfg.get("mlm_fraction", 0.15)),
        seed=seed,
    )


def _load_corpus_dir(corpus_dir: str):
    cdir = Path(corpus_dir)
    records = C.read_records(cdir / "corpus.jsonl")
    manifest = C.SplitManifest.load(cdir / "splits.json")
    vocab = C.Vocabulary.load(cdir / "vocab.txt")
    with open(cdir / "gen_meta.json") as fh:
        meta = json.load(fh)
    return records, manifest, vocab, meta


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    cfg = _merged(args, ["schema", "patients", "seed", "max_vocab"])
    schema = cfg.get("schema", "mimic14")
    patients = int(cfg.get("patients", 2000))
    seed = int(cfg.get("seed", 0))
    max_vocab = int(cfg.get("max_vocab", 2048))
    ratios = tuple(float(r) for r in (args.ratios or cfg.get("ratios", (0.8, 0.1, 0.1))))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("corpus.jsonl", "splits.json", "vocab.txt", "gen_meta.json"):
        _require_new(out / name, args.force)

    records = C.generate_synthetic_corpus(schema, patients, seed)
    records = C.dedup(records)
    manifest = C.split_by_patient(records, ratios, seed)
    train_texts = (r.text() for r in records
                   if manifest.patient_split[r.patient_id] == "train")
    vocab = C.build_vocab(train_texts, max_vocab)

    learn_f1 = None
    if not args.skip_learnability_check:
        learn_f1 = C.learnability_check(records, manifest)
        if learn_f1 < 0.95:
            raise DataError(
                f"learnability gate failed: bag-of-words F1 {learn_f1:.4f} < 0.95")

    gen_cfg = {"schema": schema, "patients": patients, "seed": seed,
               "max_vocab": max_vocab, "ratios": list(ratios)}
    chash = config_hash(gen_cfg)
    C.write_records(out / "corpus.jsonl", records)
    manifest.save(out / "splits.json")
    vocab.save(out / "vocab.txt")
    meta = {"config": gen_cfg, "config_hash": chash,
            "schema": schema, "label_names": list(C.schema_labels(schema)),
            "n_records": len(records), "vocab_hash": vocab.content_hash(),
            "learnability_f1": learn_f1}
    with open(out / "gen_meta.json", "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"gen: {len(records)} records, vocab {len(vocab)}, "
          f"learnability {learn_f1 if learn_f1 is None else round(learn_f1, 4)} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# train / eval


def _metrics_csv(path: Path, run_id: str, mode: str, epsilon, rank, seed: int,
                 report: MetricsReport, label_names, chash: str) -> None:
    cols = ["run_id", "mode", "epsilon", "rank", "seed", "weighted_f1"]
    cols += [f"f1_{name}" for name in label_names]
    row = [run_id, mode, "" if epsilon is None else _fmt(epsilon), str(rank),
           str(seed), _fmt(report.weighted_f1)]
    row += [_fmt(v) for v in report.f1]
    with open(path, "w") as fh:
        fh.write(f"# config_hash: {chash}\n")
        fh.write(",".join(cols) + "\n")
        fh.write(",".join(row) + "\n")


def _run_one_training(cfg: dict, mode: str, seed: int, epsilon, rank,
                      corpus_dir: str, step_log_path: Path | None = None):
    records, manifest, vocab, meta = _load_corpus_dir(corpus_dir)
    label_names = meta["label_names"]
    settings = _settings(cfg, mode, seed, epsilon, rank)
    mcfg = _model_config(cfg, vocab_size=len(vocab), n_labels=len(label_names))
    ids_tr, y_tr, _ = T.split_arrays(records, manifest, vocab, mcfg.max_seq_len, "train")
    ids_te, y_te, _ = T.split_arrays(records, manifest, vocab, mcfg.max_seq_len, "test")
    log_fh = open(step_log_path, "w") if step_log_path else None
    try:
        outcome = T.train_run(settings, mcfg, ids_tr, y_tr, step_log=log_fh)
    finally:
        if log_fh:
            log_fh.close()
    report = T.evaluate_model(outcome.params, ids_te, y_te,
                              float(cfg.get("decision_threshold", 0.5)),
                              label_names)
    return outcome, report, vocab, meta, settings, mcfg


def cmd_train(args) -> int:
    cfg = _merged(args, ["epochs", "learning_rate", "head_lr_scale",
                         "adapter_lr_scale", "clip_norm", "expected_batch",
                         "mlm_weight", "mlm_fraction", "max_seq_len",
                         "d_model", "n_heads", "n_layers", "d_ff"])
    mode = args.mode
    if mode == "full-ft" and args.rank is not None:
        raise ConfigurationError("full-ft does not take a LoRA rank")
    if mode == "dp-lora" and (args.epsilon is None or args.epsilon <= 0):
        raise ConfigurationError("dp-lora requires --epsilon > 0")
    rank = int(args.rank if args.rank is not None else cfg.get("rank", 4))
    epsilon = args.epsilon if mode == "dp-lora" else None
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    step_log = out / "steps.jsonl" if mode == "dp-lora" else None
    outcome, report, vocab, meta, settings, mcfg = _run_one_training(
        cfg, mode, seed, epsilon, rank, args.corpus, step_log)

    run_cfg = {"mode": mode, "seed": seed, "rank": rank,
               "epsilon": epsilon, "train": cfg,
               "corpus_hash": meta["config_hash"]}
    chash = config_hash(run_cfg)
    tag = args.tag or f"{mode}" + (f"-eps{epsilon}" if epsilon is not None else "")
    ckpt_meta = {"run_config": run_cfg, "config_hash": chash,
                 "vocab_hash": vocab.content_hash(),
                 "label_names": meta["label_names"],
                 "weighted_f1": report.weighted_f1}
    save_checkpoint(out / "checkpoint.dpck", outcome.params, tag=tag, meta=ckpt_meta)
    _metrics_csv(out / "metrics.csv", chash, mode, epsilon, rank, seed, report,
                 meta["label_names"], chash)
    with open(out / "metrics.txt", "w") as fh:
        fh.write(f"# config_hash: {chash}\n")
        fh.write(report.to_text())
    if outcome.spec is not None:
        with open(out / "privacy_report.txt", "w") as fh:
            fh.write(f"# config_hash: {chash}\n")
            fh.write(privacy_report(outcome.spec, outcome.steps_taken))
    print(f"train[{tag}]: weighted F1 = {report.weighted_f1:.4f} -> {out}")
    return 0


def cmd_eval(args) -> int:
    params, header = load_checkpoint(args.checkpoint)
    records, manifest, vocab, meta = _load_corpus_dir(args.corpus)
    if header["meta"].get("vocab_hash") not in (None, vocab.content_hash()):
        raise ConfigurationError("checkpoint vocabulary does not match this corpus")
    label_names = meta["label_names"]
    ids, targets, _ = T.split_arrays(records, manifest, vocab,
                                     params.config.max_seq_len, args.split)
    report = T.evaluate_model(params, ids, targets, args.threshold, label_names)
    sys.stdout.write(report.to_text())
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(f"# checkpoint: {header['content_hash']}\n")
            fh.write(report.to_text())
    return 0


# ---------------------------------------------------------------------------
# sweep


def _sweep_cells(modes, epsilons, ranks, seeds):
    for mode in modes:
        eps_list = epsilons if mode == "dp-lora" else [None]
        for eps in eps_list:
            for rank in ranks:
                for seed in seeds:
                    yield mode, eps, rank, seed


def cmd_sweep(args) -> int:
    cfg = _merged(args, ["epochs", "learning_rate", "head_lr_scale", "clip_norm",
                         "expected_batch", "max_seq_len"])
    modes = (args.modes.split(",") if args.modes else ["dp-lora"])
    for m in modes:
        if m not in T.MODES:
            raise ConfigurationError(f"unknown sweep mode {m!r}")
    epsilons = [float(e) for e in (args.epsilons.split(",") if args.epsilons
                                   else DEFAULT_EPSILONS)]
    ranks = [int(r) for r in (args.ranks.split(",") if args.ranks else DEFAULT_RANKS)]
    seeds = [int(s) for s in (args.seeds.split(",") if args.seeds else (0, 1, 2, 3, 4))]
    if not epsilons or not ranks or not seeds:
        raise ConfigurationError("sweep lists must be non-empty")

    _, _, _, meta = _load_corpus_dir(args.corpus)
    sweep_cfg = {"modes": modes, "epsilons": epsilons, "ranks": ranks,
                 "seeds": seeds, "train": cfg, "corpus_hash": meta["config_hash"]}
    chash = config_hash(sweep_cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs_path = out / "sweep_runs.csv"

    done: dict[tuple, float] = {}
    if runs_path.exists():
        with open(runs_path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#") or line.startswith("config_hash"):
                    continue
                h, mode, eps, rank, seed, f1 = line.split(",")
                if h != chash:
                    raise ConfigurationError(
                        f"existing sweep results use config {h}, current is {chash}; "
                        "refusing to mix")
                key = (mode, float(eps) if eps else None, int(rank), int(seed))
                done[key] = float(f1)

    cells = list(_sweep_cells(modes, epsilons, ranks, seeds))
    results: dict[tuple, float] = {}
    for mode, eps, rank, seed in cells:
        key = (mode, eps, rank, seed)
        if key in done:
            results[key] = done[key]
            continue
        _, report, _, _, _, _ = _run_one_training(cfg, mode, seed, eps, rank,
                                                  args.corpus)
        results[key] = report.weighted_f1
        print(f"sweep cell mode={mode} eps={eps} rank={rank} seed={seed}: "
              f"F1={report.weighted_f1:.4f}")

    with open(runs_path, "w") as fh:
        fh.write(f"# config_hash: {chash}\n")
        fh.write("config_hash,mode,epsilon,rank,seed,weighted_f1\n")
        for mode, eps, rank, seed in cells:
            f1 = results[(mode, eps, rank, seed)]
            fh.write(",".join([chash, mode, "" if eps is None else _fmt(eps),
                               str(rank), str(seed), _fmt(f1)]) + "\n")
    with open(out / "sweep_summary.csv", "w") as fh:
        fh.write(f"# config_hash: {chash}\n")
        fh.write("config_hash,mode,epsilon,rank,mean_f1,std_f1,n_seeds\n")
        for mode in modes:
            eps_list = epsilons if mode == "dp-lora" else [None]
            for eps in eps_list:
                for rank in ranks:
                    vals = np.array([results[(mode, eps, rank, s)] for s in seeds])
                    fh.write(",".join([chash, mode,
                                       "" if eps is None else _fmt(eps), str(rank),
                                       _fmt(vals.mean()), _fmt(vals.std()),
                                       str(len(seeds))]) + "\n")
    print(f"sweep: {len(cells)} cells -> {out}")
    return 0


# ---------------------------------------------------------------------------
# probe


def cmd_probe(args) -> int:
    specs = [s.split("=", 1) for s in args.checkpoints]
    if len(specs) < 2:
        raise ConfigurationError("probe needs at least two tag=checkpoint entries")
    records, manifest, vocab, meta = _load_corpus_dir(args.corpus)
    models = []
    vhash = vocab.content_hash()
    max_len = None
    for tag, path in specs:
        params, header = load_checkpoint(path)
        stored = header["meta"].get("vocab_hash")
        if stored not in (None, vhash):
            raise ConfigurationError(
                f"checkpoint {path} was trained with a different vocabulary")
        max_len = params.config.max_seq_len if max_len is None else max_len
        if params.config.max_seq_len != max_len:
            raise ConfigurationError("checkpoints disagree on max_seq_len")
        models.append((tag, params))

    ids, _, rids = T.split_arrays(records, manifest, vocab, max_len, args.split)
    if args.probe_size and args.probe_size < ids.shape[0]:
        rng = T.rng_from(args.seed, 0x9B0E)
        keep = np.sort(rng.choice(ids.shape[0], size=args.probe_size, replace=False))
        ids = ids[keep]
        rids = [rids[i] for i in keep]

    results = run_probe(models, ids, rids, fraction=args.fraction, seed=args.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "probe_details.csv", "w") as fh:
        fh.write("model_tag,report_id,cosine\n")
        for res in results:
            for rid, cos in zip(res.report_ids, res.cosines):
                fh.write(f"{res.tag},{rid},{_fmt(cos)}\n")
    with open(out / "probe_summary.csv", "w") as fh:
        fh.write("model_tag,mean,std,n,skipped\n")
        for res in results:
            fh.write(f"{res.tag},{_fmt(res.mean)},{_fmt(res.std)},{res.n},{res.skipped}\n")
    for res in results:
        print(f"probe[{res.tag}]: mean cosine = {res.mean:.4f} (std {res.std:.4f}, n={res.n})")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dplora",
                                description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic corpus + splits + vocab")
    g.add_argument("--out", required=True)
    g.add_argument("--schema", choices=sorted(C.SCHEMAS))
    g.add_argument("--patients", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--max-vocab", dest="max_vocab", type=int)
    g.add_argument("--ratios", type=float, nargs="+")
    g.add_argument("--config")
    g.add_argument("--force", action="store_true")
    g.add_argument("--skip-learnability-check", action="store_true")
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train one model and evaluate it")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=T.MODES, required=True)
    t.add_argument("--epsilon", type=float)
    t.add_argument("--rank", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--tag")
    t.add_argument("--config")
    for flag, typ in (("--epochs", int), ("--learning-rate", float),
                      ("--head-lr-scale", float), ("--adapter-lr-scale", float),
                      ("--clip-norm", float), ("--expected-batch", float),
                      ("--mlm-weight", float), ("--mlm-fraction", float),
                      ("--max-seq-len", int), ("--d-model", int),
                      ("--n-heads", int), ("--n-layers", int), ("--d-ff", int)):
        t.add_argument(flag, dest=flag[2:].replace("-", "_"), type=typ)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", help="epsilon x rank x seed grid")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--modes", help="comma list from full-ft,lora,dp-lora")
    s.add_argument("--epsilons", help="comma list, dp-lora cells only")
    s.add_argument("--ranks", help="comma list")
    s.add_argument("--seeds", help="comma list")
    s.add_argument("--config")
    for flag, typ in (("--epochs", int), ("--learning-rate", float),
                      ("--head-lr-scale", float), ("--clip-norm", float),
                      ("--expected-batch", float), ("--max-seq-len", int)):
        s.add_argument(flag, dest=flag[2:].replace("-", "_"), type=typ)
    s.set_defaults(fn=cmd_sweep)

    pr = sub.add_parser("probe", help="memorization probe over tagged checkpoints")
    pr.add_argument("--corpus", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--checkpoints", nargs="+", metavar="TAG=PATH", required=True)
    pr.add_argument("--split", default="train")
    pr.add_argument("--fraction", type=float, default=0.3)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--probe-size", dest="probe_size", type=int)
    pr.set_defaults(fn=cmd_probe)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigurationError, ContractError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
