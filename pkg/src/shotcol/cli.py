"""``shotcol`` command line: generate -> pretrain -> extract -> train -> evaluate / retrieve."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from . import boundary as bd
from . import numkernel as nk
from .config import PROFILES, RunConfig
from .corpus import Corpus, generate_corpus, load_corpus, modality_matrix, save_corpus, split_corpus
from .evaluation import (RankedPredictions, boundary_metrics,
                         knn_retrieval_precision, read_jsonl)
from .pretrain import embed, load_pretrain_run, pretrain, save_pretrain_run

log = logging.getLogger("shotcol")

EXIT_ERROR = 1
EXIT_MISSING_INPUT = 2


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(2, "input not found", str(p))
    return p


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(out_dir: Path, command: str, cfg: RunConfig, inputs: Dict[str, str],
                       args: Dict[str, object]) -> Path:
    """Record what produced ``out_dir`` so the command can be rerun exactly."""
    outputs = {p.name: _sha256(p) for p in sorted(out_dir.iterdir())
               if p.is_file() and p.name != "run_manifest.json" and not p.name.endswith(".tmp")}
    manifest = {"command": command, "args": args, "inputs": inputs,
                "config": cfg.to_dict(), "config_sha256": cfg.digest(), "seed": cfg.seed,
                "versions": {"shotcol": __version__, "numpy": np.__version__,
                             "python": platform.python_version()},
                "outputs": outputs}
    path = out_dir / "run_manifest.json"
    nk.atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_config(args) -> RunConfig:
    cfg = RunConfig.profile(args.profile)
    if args.config:
        cfg = RunConfig.from_json(_require(args.config).read_text(), base=cfg)
    if args.seed is not None:
        cfg = RunConfig.from_dict({"seed": args.seed}, base=cfg)
    return cfg


def save_embeddings(per_title: Dict[str, np.ndarray], out_dir: Path, info: dict) -> None:
    nk.save_arrays(per_title, out_dir / "embeddings", extra=info)


def load_embeddings(path) -> Dict[str, np.ndarray]:
    p = _require(path)
    arrays, _ = nk.load_arrays(p / "embeddings" if p.is_dir() else p)
    return arrays


def _load_encoder(path):
    p = _require(path)
    if p.is_dir():
        pair, _ = load_pretrain_run(p)
        return pair.spec, pair.query
    return nk.load_checkpoint(p)


def _split_titles(corpus: Corpus, cfg: RunConfig, split: str) -> List[str]:
    if split == "all":
        return [t.title_id for t in corpus.titles]
    train, val, test = split_corpus([t.title_id for t in corpus.titles], cfg.eval.split,
                                    cfg.eval.split_seed)
    return {"train": train, "val": val, "test": test}[split]


def _samples(corpus: Corpus, embeddings, titles, cfg: RunConfig) -> bd.BoundarySamples:
    mode = bd.ALL_BOUNDARIES if cfg.eval.task == "scene" else bd.WINDOWED_NEGATIVES
    parts = []
    for tid in titles:
        title = corpus.title(tid)
        parts.append(bd.build_boundary_samples(title, embeddings[tid], cfg.classifier.context,
                                               mode, cfg.eval.cue_radius))
    return bd.BoundarySamples.concat(parts)


# --- commands ---------------------------------------------------------------

def cmd_generate(args, cfg: RunConfig, out: Path):
    gen = cfg.generator.to_dict()
    gen["seed"] = cfg.seed
    corpus = generate_corpus(type(cfg.generator).from_dict(gen))
    save_corpus(corpus, out)
    return {}


def cmd_pretrain(args, cfg: RunConfig, out: Path):
    corpus = load_corpus(_require(args.corpus))
    result = pretrain(corpus, cfg.pretrain, seed=cfg.seed, modality=args.modality)
    save_pretrain_run(result, out)
    return {"corpus": str(args.corpus)}


def cmd_extract(args, cfg: RunConfig, out: Path):
    corpus = load_corpus(_require(args.corpus))
    per_title = {}
    if args.baseline == "raw-pixel":
        for t in corpus.titles:
            per_title[t.title_id] = modality_matrix(t, args.modality).astype(np.float32)
        source = "raw-pixel"
    else:
        if args.baseline == "random-encoder":
            width = modality_matrix(corpus.titles[0], args.modality).shape[1]
            spec = cfg.pretrain.encoder_spec(width)
            params = nk.init_params(spec, cfg.seed)
            source = "random-encoder"
        else:
            if not args.checkpoint:
                raise ValueError("extract needs --checkpoint unless --baseline is given")
            spec, params = _load_encoder(args.checkpoint)
            # content hash rather than path, so identical runs in different directories agree
            digest = hashlib.sha256(b"".join(params[k].tobytes() for k in sorted(params)))
            source = "checkpoint:" + digest.hexdigest()
        for t in corpus.titles:
            per_title[t.title_id] = embed(spec, params, modality_matrix(t, args.modality),
                                          cfg.pretrain.normalize)
    if args.fuse_with:
        other = load_embeddings(args.fuse_with)
        per_title = {k: bd.fuse_modalities(v, other.get(k)) for k, v in per_title.items()}
    save_embeddings(per_title, out, {"source": source, "modality": args.modality,
                                     "fused": bool(args.fuse_with)})
    return {"corpus": str(args.corpus), "checkpoint": str(args.checkpoint),
            "fuse_with": str(args.fuse_with)}


def cmd_train(args, cfg: RunConfig, out: Path):
    corpus = load_corpus(_require(args.corpus))
    emb = load_embeddings(args.embeddings)
    train_ids = _split_titles(corpus, cfg, "train")
    if args.label_fraction < 1.0:
        train_ids = train_ids[:max(1, int(round(args.label_fraction * len(train_ids))))]
    samples = _samples(corpus, emb, train_ids, cfg)
    clf = bd.train_classifier(samples, cfg.classifier, seed=cfg.seed)
    bd.save_classifier(clf, out / "classifier")
    return {"corpus": str(args.corpus), "embeddings": str(args.embeddings)}


def cmd_evaluate(args, cfg: RunConfig, out: Path):
    inputs = {}
    knn = {}
    if args.predictions:
        records = read_jsonl(_require(args.predictions))
        inputs["predictions"] = str(args.predictions)
    else:
        if not (args.classifier and args.embeddings and args.corpus):
            raise ValueError("evaluate needs --predictions or all of --classifier/--embeddings/--corpus")
        corpus = load_corpus(_require(args.corpus))
        emb = load_embeddings(args.embeddings)
        clf = bd.load_classifier(_require(args.classifier) / "classifier"
                                 if Path(args.classifier).is_dir() else args.classifier)
        titles = _split_titles(corpus, cfg, args.split)
        samples = _samples(corpus, emb, titles, cfg)
        records = bd.prediction_records(samples, bd.predict_boundaries(clf, samples))
        bd.write_jsonl(out / "predictions.jsonl", records)
        if cfg.eval.task == "scene":
            knn = _knn_table(corpus, emb, titles, cfg.eval.knn_k)
        inputs.update(classifier=str(args.classifier), embeddings=str(args.embeddings),
                      corpus=str(args.corpus))
    report = boundary_metrics(RankedPredictions.from_records(records),
                              threshold=cfg.eval.threshold, window_s=cfg.eval.window_s)
    report.knn_precision_by_k = knn
    nk.atomic_write_text(out / "metrics.json", report.to_json())
    print(report.to_json())
    return inputs


def _knn_table(corpus: Corpus, emb, titles, ks) -> Dict[int, float]:
    e = [emb[t] for t in titles]
    s = [corpus.title(t).scene_ids for t in titles]
    return {int(k): knn_retrieval_precision(e, s, int(k))[0] for k in ks}


def cmd_retrieve(args, cfg: RunConfig, out: Path):
    corpus = load_corpus(_require(args.corpus))
    emb = load_embeddings(args.embeddings)
    titles = _split_titles(corpus, cfg, args.split)
    ks = args.k or list(cfg.eval.knn_k)
    table = {}
    for k in ks:
        precision, skipped = knn_retrieval_precision([emb[t] for t in titles],
                                                     [corpus.title(t).scene_ids for t in titles], k)
        table[str(k)] = {"precision": precision, "skipped_titles": skipped}
    nk.atomic_write_text(out / "knn.json", json.dumps(table, indent=2, sort_keys=True))
    print(json.dumps(table, sort_keys=True))
    return {"corpus": str(args.corpus), "embeddings": str(args.embeddings)}


def cmd_cuepoints(args, cfg: RunConfig, out: Path):
    records = read_jsonl(_require(args.predictions))
    by_title: Dict[str, list] = {}
    for r in records:
        by_title.setdefault(r["title_id"], []).append(r)
    selected = []
    for tid in sorted(by_title):
        rs = by_title[tid]
        times = [r["boundary_time_s"] for r in rs]
        hours = max(times) / 3600.0 if times else 0.0
        cons = bd.CuePointConstraints(cfg.eval.cue_min_gap_s,
                                      max(1, int(np.ceil(hours * cfg.eval.cue_max_per_hour))),
                                      cfg.eval.threshold)
        for i in bd.select_cue_points([r["score"] for r in rs], times, cons):
            selected.append({"title_id": tid, "time_s": rs[i]["boundary_time_s"], "score": rs[i]["score"]})
    bd.write_jsonl(out / "cuepoints.jsonl", selected)
    return {"predictions": str(args.predictions)}


COMMANDS = {"generate": cmd_generate, "pretrain": cmd_pretrain, "extract": cmd_extract,
            "train": cmd_train, "evaluate": cmd_evaluate, "retrieve": cmd_retrieve,
            "cuepoints": cmd_cuepoints}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file overriding the profile")
    common.add_argument("--profile", choices=PROFILES, default="desk")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", required=True, help="output directory")

    parser = argparse.ArgumentParser(prog="shotcol", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic corpus")
    p = sub.add_parser("pretrain", parents=[common], help="contrastive pretraining")
    p.add_argument("--corpus", required=True)
    p.add_argument("--modality", type=int, choices=(1, 2), default=1)
    p = sub.add_parser("extract", parents=[common], help="per-shot embeddings")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", choices=("random-encoder", "raw-pixel"))
    p.add_argument("--modality", type=int, choices=(1, 2), default=1)
    p.add_argument("--fuse-with", help="embeddings of another modality to concatenate")
    p = sub.add_parser("train", parents=[common], help="boundary classifier")
    p.add_argument("--corpus", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--label-fraction", type=float, default=1.0)
    p = sub.add_parser("evaluate", parents=[common], help="metrics report")
    p.add_argument("--predictions")
    p.add_argument("--classifier")
    p.add_argument("--embeddings")
    p.add_argument("--corpus")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p = sub.add_parser("retrieve", parents=[common], help="k-NN same-scene precision")
    p.add_argument("--corpus", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--k", type=int, nargs="+")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p = sub.add_parser("cuepoints", parents=[common], help="constrained cue-point selection")
    p.add_argument("--predictions", required=True)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("SHOTCOL_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        inputs = COMMANDS[args.command](args, cfg, out)
        arg_record = {k: v for k, v in vars(args).items() if k not in ("out",)}
        write_run_manifest(out, args.command, cfg, inputs, arg_record)
    except FileNotFoundError as exc:
        path = exc.filename or str(exc)
        _report_error(args, "missing_input", f"input not found: {path}", path=str(path))
        return EXIT_MISSING_INPUT
    except Exception as exc:  # every failure becomes a machine-readable record
        log.debug("command failed", exc_info=True)
        _report_error(args, type(exc).__name__, str(exc))
        return EXIT_ERROR
    return 0


def _report_error(args, kind: str, message: str, path: Optional[str] = None) -> None:
    record = {"error": kind, "command": args.command, "message": message}
    if path is not None:
        record["path"] = path
    sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")


if __name__ == "__main__":
    sys.exit(main())
