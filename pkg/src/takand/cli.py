"""Command-line entry point: prepare, pretrain, train, eval, sample-episode.

Exit codes: 0 success, 1 input error (bad config, missing or malformed files),
2 runtime failure (training diverged, unsupported variant).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import yaml

from . import kg_store, plotting
from .embedding import export_embeddings, load_embeddings, pretrain_transe
from .kg_store import DataError, KGData
from .training import TrainConfig, TrainingError, build_model, evaluate, load_checkpoint, save_checkpoint, train

log = logging.getLogger("takand")

RUN_KEYS = {"data_dir", "out", "split", "checkpoint", "embeddings", "relation", "train"}
EMBED_DIR = "embeddings"
MODEL_FILE = "model.pt"


class InputError(Exception):
    """Raised for problems the user can fix in the inputs; maps to exit code 1."""


@dataclasses.dataclass
class RunConfig:
    train: TrainConfig
    data_dir: Optional[Path] = None
    out: Path = Path("runs/default")
    split: str = "test"
    checkpoint: Optional[Path] = None
    embeddings: Optional[Path] = None
    relation: Optional[str] = None

    def to_dict(self) -> dict:
        out = {k: (str(v) if isinstance(v, Path) else v) for k, v in dataclasses.asdict(self).items() if k != "train"}
        tc = dataclasses.asdict(self.train)
        tc["channels"] = list(tc["channels"])
        out["train"] = tc
        return out


def load_run_config(path: Optional[str], args: argparse.Namespace) -> RunConfig:
    doc = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise InputError(f"config file not found: {p}")
        try:
            doc = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise InputError(f"{p}: not valid YAML: {exc}") from exc
        if not isinstance(doc, dict):
            raise InputError(f"{p}: top level must be a mapping")
    unknown = set(doc) - RUN_KEYS
    if unknown:
        raise InputError(f"unknown config keys: {sorted(unknown)}")
    train_doc = dict(doc.get("train") or {})
    # flags override the file
    for flag, key in (("seed", "seed"), ("variant", "variant"), ("k_shot", "k_shot"), ("steps", "steps")):
        value = getattr(args, flag, None)
        if value is not None:
            train_doc[key] = value
    try:
        tc = TrainConfig.from_dict(train_doc)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid train config: {exc}") from exc
    run = RunConfig(tc)
    for key in ("data_dir", "out", "checkpoint", "embeddings"):
        value = getattr(args, key, None) or doc.get(key)
        if value is not None:
            setattr(run, key, Path(value))
    run.split = getattr(args, "split", None) or doc.get("split", run.split)
    run.relation = getattr(args, "relation", None) or doc.get("relation")
    if run.split not in kg_store.SPLIT_FILES:
        raise InputError(f"unknown split {run.split!r}; expected one of {sorted(kg_store.SPLIT_FILES)}")
    return run


def _require_data_dir(run: RunConfig) -> Path:
    if run.data_dir is None:
        raise InputError("no data directory given (--data-dir or data_dir in the config)")
    missing = [n for n in [kg_store.GRAPH_FILE, kg_store.CANDIDATE_FILE, *kg_store.SPLIT_FILES.values()] if not (run.data_dir / n).is_file()]
    if missing:
        raise InputError(f"{run.data_dir}: missing files: {', '.join(missing)}")
    return run.data_dir


def _load(run: RunConfig) -> KGData:
    return kg_store.load_dataset(_require_data_dir(run), run.train.max_neighbors, run.train.seed)


def _echo_config(run: RunConfig, out: Optional[Path] = None) -> None:
    text = yaml.safe_dump(run.to_dict(), sort_keys=True)
    print("# resolved config")
    print(text, end="")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(text)


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- commands


def cmd_prepare(run: RunConfig) -> dict:
    data = _load(run)
    bg = data.background
    report = {
        "entities": bg.num_entities,
        "relations": bg.num_relations,
        "background_triples": len(bg.triples),
        "candidates_dropped": data.candidates.dropped,
        "splits": {
            split: {"relations": len(ts), "triples": sum(len(v) for v in ts.tasks.values())} for split, ts in data.tasks.items()
        },
        "max_neighbors": data.neighbors.max_neighbors,
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    return report


def cmd_pretrain(run: RunConfig) -> Path:
    data = _load(run)
    tc = run.train
    _echo_config(run, run.out)
    table = pretrain_transe(
        data.background, tc.dim, tc.transe_epochs, tc.transe_margin, tc.transe_lr, np.random.default_rng(tc.seed), tc.transe_batch_size, tc.torch_dtype
    )
    target = export_embeddings(table, run.out / EMBED_DIR, data.background.vocab_hash())
    _write_json(run.out / "transe_history.json", table.history)
    print(f"embeddings written to {target}")
    return target


def _embeddings_for(run: RunConfig, data: KGData):
    source = run.embeddings or (run.out / EMBED_DIR)
    if (source / "embeddings.json").is_file():
        table = load_embeddings(source, data.background.vocab_hash())
        if table.dim != run.train.dim:
            raise InputError(f"embeddings in {source} have dim {table.dim}, config expects {run.train.dim}")
        return table.to(run.train.torch_dtype)
    if run.embeddings is not None:
        raise InputError(f"no embeddings.json in {source}")
    return None


def cmd_train(run: RunConfig) -> dict:
    data = _load(run)
    embeddings = _embeddings_for(run, data)
    _echo_config(run, run.out)
    result = train(run.train, data, embeddings, out_dir=run.out)
    ckpt = save_checkpoint(run.out / MODEL_FILE, result.model, data, result.losses)
    _write_json(run.out / "losses.json", {"losses": result.losses, "evals": result.evals, "best_step": result.best_step})
    plotting.loss_curve(result.losses, run.out / "loss_curve.png")
    summary = {"checkpoint": str(ckpt), "steps": len(result.losses), "best_step": result.best_step}
    if result.losses:
        summary["final_loss"] = result.losses[-1]["loss"]
    print(json.dumps(summary, sort_keys=True))
    return summary


def cmd_eval(run: RunConfig) -> dict:
    data = _load(run)
    ckpt = run.checkpoint or (run.out / MODEL_FILE)
    if not ckpt.is_file():
        raise InputError(f"checkpoint not found: {ckpt}")
    try:
        model = load_checkpoint(ckpt, data)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if len(data.tasks[run.split]) == 0:
        raise InputError(f"split {run.split!r} has no relations")
    report = evaluate(model, data, run.split, run.train.k_shot, run.train.seed)
    run.out.mkdir(parents=True, exist_ok=True)
    text = report.to_json() + "\n"
    (run.out / f"metrics_{run.split}.json").write_text(text)
    plotting.relation_metrics(report.per_relation, run.out / f"metrics_{run.split}.png", title=f"{run.split} split")
    print(text, end="")
    return report.to_dict()


def format_episode(ep: kg_store.Episode, data: KGData) -> str:
    ents = data.background.entity_names()
    rels = data.background.relation_names()
    name = rels[ep.relation]

    def rows(label, pairs):
        lines = [f"{label} ({len(pairs)}):"]
        lines += [f"  {ents[h]}\t{name}\t{ents[t]}" for h, t in pairs]
        return lines

    lines = [f"relation: {name}"]
    lines += rows("support", ep.support) + rows("support negatives", ep.support_neg)
    lines += rows("queries", ep.queries) + rows("query negatives", ep.query_neg)
    return "\n".join(lines)


def cmd_sample_episode(run: RunConfig) -> str:
    data = _load(run)
    if not run.relation:
        raise InputError("sample-episode needs --relation")
    rel_id = data.background.relation_vocab.get(run.relation)
    if rel_id is None or not any(rel_id in ts.tasks for ts in data.tasks.values()):
        raise InputError(f"unknown task relation {run.relation!r}")
    tasks = data.tasks[data.split_of(rel_id)]
    K = run.train.k_shot
    if len(tasks.tasks[rel_id]) < K + 1:
        raise InputError(f"relation {run.relation!r} has {len(tasks.tasks[rel_id])} triples, K={K} needs at least {K + 1}")
    rng = np.random.default_rng(run.train.seed)
    ep = kg_store.sample_episode(tasks, rel_id, K, run.train.queries_per_step, data.candidates, rng, data.truth(rel_id))
    text = format_episode(ep, data)
    print(text)
    return text


COMMANDS = {
    "prepare": cmd_prepare,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "sample-episode": cmd_sample_episode,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="takand", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--data-dir", dest="data_dir")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--k-shot", dest="k_shot", type=int)
        p.add_argument("--variant", choices=["full", "V1", "V2", "V3"])
        p.add_argument("--split", choices=sorted(kg_store.SPLIT_FILES))
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            p.add_argument("--steps", type=int)
        if name == "eval":
            p.add_argument("--checkpoint")
        if name == "pretrain" or name == "train":
            p.add_argument("--embeddings", help="directory with exported embeddings")
        if name == "sample-episode":
            p.add_argument("--relation", required=True)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("TAKAND_NUM_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        run = load_run_config(args.config, args)
        COMMANDS[args.command](run)
    except (InputError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, NotImplementedError, RuntimeError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
