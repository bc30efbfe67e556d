"""Command-line runner: generate, train, eval, attack, cost.

Every artifact goes under ``--out``.  Each command records its config hash,
package versions and output digests in ``manifest.json``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .attack import ProbeConfig, sweep_many
from .checkpoint import load_all, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, field_names, resolve
from .data import (
    ClientPartition,
    InteractionLog,
    chronological_split,
    generate_synthetic,
    kmeans,
    partition_clustered,
    partition_dirichlet,
    read_tsv,
    svd_user_embeddings,
    write_tsv,
)
from .errors import ConfigError, NotFoundError
from .federation import TrainConfig, WarmupConfig, make_clients, run_training
from .metrics import evaluate_clients
from .model import ModelConfig
from .split import SplitPlan, break_even_embedding_cost, cost_report, fedavg_cost_report, split_is_cheaper

log = logging.getLogger("splitfedrec")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


# -- file layout ------------------------------------------------------------


def data_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out) / "data"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_manifest(cfg: ExperimentConfig, command: str, outputs: Sequence[Path]) -> Path:
    out = Path(cfg.out)
    path = out / "manifest.json"
    manifest = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    manifest["versions"] = {
        "splitfedrec": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }
    manifest.setdefault("commands", {})[command] = {
        "config_hash": cfg.config_hash(),
        "config": cfg.content_dict(),
        "outputs": {p.relative_to(out).as_posix(): _sha256(p) for p in sorted(outputs)},
    }
    return _write_json(path, manifest)


def _write_latents(path: Path, latents: np.ndarray, groups: np.ndarray) -> None:
    dims = latents.shape[1]
    lines = ["user_id\tgroup\t" + "\t".join(f"z{j}" for j in range(dims))]
    lines += [f"{u}\t{int(g)}\t" + "\t".join(repr(float(v)) for v in row) for u, (g, row) in enumerate(zip(groups, latents))]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_latents(path: Path) -> tuple[np.ndarray, np.ndarray]:
    rows = path.read_text(encoding="utf-8").splitlines()[1:]
    groups, latents = [], []
    for line in rows:
        cols = line.split("\t")
        groups.append(int(cols[1]))
        latents.append([float(v) for v in cols[2:]])
    return np.array(latents), np.array(groups, dtype=np.int64)


def load_dataset(cfg: ExperimentConfig) -> tuple[InteractionLog, ClientPartition]:
    ddir = data_dir(cfg)
    tsv, part = ddir / "interactions.tsv", ddir / "partition.json"
    for p in (tsv, part):
        if not p.exists():
            raise NotFoundError(f"missing {p}; run the generate command first")
    partition = ClientPartition.from_json(part)
    if partition.num_clients != cfg.num_clients:
        raise ConfigError(
            f"dataset was partitioned for {partition.num_clients} clients, config asks for {cfg.num_clients}"
        )
    return read_tsv(tsv), partition


# -- commands ---------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig) -> list[Path]:
    ddir = data_dir(cfg)
    ddir.mkdir(parents=True, exist_ok=True)
    if cfg.tsv_path is None:
        syn = generate_synthetic(
            cfg.num_users, cfg.num_items, cfg.num_clusters, cfg.events_per_user, cfg.seed,
            temperature=cfg.temperature,
        )
        log_, latents, groups = syn.log, syn.latents, syn.clusters
    else:
        log_ = read_tsv(cfg.tsv_path)
        latents = svd_user_embeddings(log_)
        groups = kmeans(latents, min(cfg.num_clusters, log_.num_users), cfg.seed)
    if cfg.num_clients > log_.num_users:
        raise ConfigError("more clients than users in the dataset")
    if cfg.partition == "clustered":
        partition = partition_clustered(latents, cfg.num_clients, cfg.seed)
    else:
        partition = partition_dirichlet(groups, cfg.num_clients, cfg.dirichlet_c, cfg.seed)

    outputs = [ddir / "interactions.tsv", ddir / "latents.tsv", ddir / "partition.json"]
    write_tsv(log_, outputs[0])
    _write_latents(outputs[1], latents, groups)
    partition.to_json(outputs[2])
    write_manifest(cfg, "generate", outputs)
    return outputs


def model_config(cfg: ExperimentConfig, num_items: int) -> ModelConfig:
    return ModelConfig(
        num_items=num_items,
        hidden_dim=cfg.hidden_dim,
        num_layers=cfg.num_layers,
        lora_rank=cfg.lora_rank,
        seed=cfg.seed,
    )


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(
        method=cfg.method,
        epochs=cfg.epochs,
        local_rounds=cfg.local_rounds,
        lr=cfg.lr,
        batch_size=cfg.batch_size,
        tau=cfg.tau,
        mu=cfg.mu,
        warmup=WarmupConfig(cfg.alpha, cfg.beta),
        seed=cfg.seed,
        workers=cfg.workers,
        embedding_units=cfg.c,
        layer_units=cfg.b,
    )


def cmd_train(cfg: ExperimentConfig) -> list[Path]:
    log_, partition = load_dataset(cfg)
    if max(cfg.ks) > log_.num_items:
        raise ConfigError("largest K exceeds the catalog size")
    split = chronological_split(log_)
    datasets = [split.examples("train", partition.users_of(c)) for c in range(cfg.num_clients)]
    clients = make_clients(datasets, model_config(cfg, log_.num_items), embedding_units=cfg.c, layer_units=cfg.b)
    result = run_training(clients, SplitPlan(cfg.k, cfg.num_layers), train_config(cfg))

    out = Path(cfg.out)
    outputs = [_write_json(out / "history.json", result.history)]
    for c in result.clients:
        outputs.append(save_checkpoint(c.model, c.client_id, out))
        path = out / "exchanges" / f"client_{c.client_id}.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        c.channel.to_jsonl(path)
        outputs.append(path)
    write_manifest(cfg, "train", outputs)
    return outputs


def cmd_eval(cfg: ExperimentConfig) -> list[Path]:
    log_, partition = load_dataset(cfg)
    models = load_all(cfg.out, cfg.num_clients)
    split = chronological_split(log_)
    examples = {c: split.examples("test", partition.users_of(c)) for c in range(cfg.num_clients)}
    report = evaluate_clients(models, examples, cfg.ks, cfg.distance)
    out = Path(cfg.out)
    report.write(out, "metrics")
    outputs = [out / "metrics.csv", out / "metrics.json"]
    write_manifest(cfg, "eval", outputs)
    return outputs


def cmd_attack(cfg: ExperimentConfig) -> list[Path]:
    log_, _ = load_dataset(cfg)
    model = load_checkpoint(cfg.out, cfg.probe_client)
    split = chronological_split(log_)
    sample = split.examples("test", split.users)
    probes = [
        ProbeConfig(kind=k, hidden_dim=cfg.probe_hidden_dim, train_steps=cfg.probe_steps, lr=cfg.probe_lr, seed=cfg.seed)
        for k in cfg.probe_kinds
    ]
    out = Path(cfg.out)
    outputs = []
    for report in sweep_many(model, sample, probes):
        path = out / f"attack_{report.kind}.csv"
        report.write(path)
        outputs.append(path)
    write_manifest(cfg, "attack", outputs)
    return outputs


def cmd_cost(cfg: ExperimentConfig) -> list[Path]:
    plan = SplitPlan(cfg.k, cfg.num_layers)
    payload = {
        "fellrec": cost_report(plan, cfg.b, cfg.c).to_dict(),
        "fedavg": fedavg_cost_report(cfg.num_layers, cfg.b, cfg.c).to_dict(),
        "split_is_cheaper": split_is_cheaper(plan, cfg.b, cfg.c),
        "break_even_c": break_even_embedding_cost(plan, cfg.b),
        "num_layers": cfg.num_layers,
        "k": cfg.k,
    }
    outputs = [_write_json(Path(cfg.out) / "cost.json", payload)]
    write_manifest(cfg, "cost", outputs)
    return outputs


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "attack": cmd_attack,
    "cost": cmd_cost,
}


# -- argument parsing -------------------------------------------------------


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    defaults = ExperimentConfig()
    parser = _Parser(prog="splitfedrec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON config file")
        for field in field_names():
            value = getattr(defaults, field)
            flags = [f"--{field}"] + ([f"--{field.replace('_', '-')}"] if "_" in field else [])
            if field in ("ks", "probe_kinds"):
                kind = int if field == "ks" else str
                p.add_argument(*flags, dest=field, nargs="+", type=kind, default=None)
            elif isinstance(value, bool):
                p.add_argument(*flags, dest=field, type=_parse_bool, default=None)
            elif isinstance(value, int):
                p.add_argument(*flags, dest=field, type=int, default=None)
            elif isinstance(value, float):
                p.add_argument(*flags, dest=field, type=float, default=None)
            else:
                p.add_argument(*flags, dest=field, default=None)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    overrides = {f: getattr(args, f) for f in field_names()}
    try:
        cfg = resolve(args.config, overrides)
        outputs = COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001  reported, not swallowed
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    for p in outputs:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
