"""Subcommand implementations.  Each returns the records it appended."""

from __future__ import annotations

import logging
import uuid
from pathlib import Path

import numpy as np

from . import analysis, models, reports
from .attacks import AttackConfig, bpda_pgd, pgd, transfer_pgd
from .config import fingerprint
from .data import DatasetHandle, load_cifar10, make_synthetic
from .quant import QuantTap
from .records import RecordStore, ResultRecord
from .seeding import derive_seed
from .train import TrainConfig, eval_grid, select_overdesign, train_spectrum

log = logging.getLogger(__name__)

SUBCOMMANDS = ("train-spectrum", "eval-grid", "quant-sweep", "filter-norms",
               "preact-stats", "corrupt-eval", "report")


class Context:
    """Resolved config plus the run directory layout."""

    def __init__(self, resolved: dict, out: str | Path, jobs: int = 1):
        self.cfg = resolved
        self.out = Path(out)
        self.jobs = jobs
        self.fingerprint = fingerprint(resolved)
        self.seed = resolved["run"]["seed"]
        self.run_id = uuid.uuid4().hex[:12]
        self.store = RecordStore(self.out / "records.jsonl")

    @property
    def ckpt_dir(self) -> Path:
        return self.out / "checkpoints"

    def ckpt_path(self, eps) -> Path:
        return self.ckpt_dir / f"eps_{_num(eps)}.psl"

    def record(self, kind: str, keys: dict, value: float, seed: int | None = None) -> ResultRecord:
        return ResultRecord(self.run_id, self.fingerprint, kind, keys, float(value),
                            self.seed if seed is None else seed)

    def datasets(self) -> tuple[DatasetHandle, DatasetHandle]:
        d = self.cfg["data"]
        if d["kind"] == "cifar10":
            train, test = load_cifar10(d["path"], "train"), load_cifar10(d["path"], "test")
        else:
            common = dict(num_classes=d["num_classes"], resolution=d["resolution"],
                          seed=derive_seed(self.seed, "data"),
                          precise_amplitude=d["precise_amplitude"],
                          robust_amplitude=d["robust_amplitude"],
                          robust_spread=d["robust_spread"], noise=d["noise"])
            train = make_synthetic(samples_per_class=d["samples_per_class"], split="train", **common)
            test = make_synthetic(samples_per_class=d["test_samples_per_class"], split="test", **common)
        if d["max_train"]:
            train = train.subset(slice(0, d["max_train"]))
        if d["max_test"]:
            test = test.subset(slice(0, d["max_test"]))
        return train, test

    def train_config(self) -> TrainConfig:
        t = self.cfg["train"]
        return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"],
                           momentum=t["momentum"], weight_decay=t["weight_decay"],
                           decay_epochs=tuple(t["decay_epochs"]), decay_factor=t["decay_factor"],
                           attack_steps=t["attack_steps"], random_start=t["random_start"],
                           clamp_to_pixel_range=t["clamp_to_pixel_range"],
                           val_fraction=t["val_fraction"], val_attack_steps=t["val_attack_steps"],
                           seed=derive_seed(self.seed, "train"))

    def load_models(self) -> dict[float, models.Network]:
        nets = {}
        for eps in self.cfg["train"]["epsilons"]:
            path = self.ckpt_path(eps)
            if not path.exists():
                raise FileNotFoundError(f"{path} missing; run `psl train-spectrum` first")
            nets[eps] = models.load(path)
        return nets


def _num(x):
    x = float(x)
    return int(x) if x.is_integer() else x


def _emit(ctx: Context, records: list[ResultRecord]) -> list[ResultRecord]:
    ctx.store.append(records)
    return records


def cmd_train_spectrum(ctx: Context) -> list[ResultRecord]:
    train, test = ctx.datasets()
    m = ctx.cfg["model"]
    results = train_spectrum(ctx.cfg["train"]["epsilons"], ctx.train_config(), train,
                             m["arch"], m["activation"], m["width"], jobs=ctx.jobs)
    ctx.ckpt_dir.mkdir(parents=True, exist_ok=True)
    recs = []
    for eps, res in results.items():
        models.save(res.net, ctx.ckpt_path(eps), {"fingerprint": ctx.fingerprint})
        acc = models.accuracy(res.net, test.images, test.labels)
        recs.append(ctx.record("clean_acc", {"model_eps": _num(eps), "split": "test"}, acc))
        print(f"eps={_num(eps):>4}  best_epoch={res.best_epoch:>3}  clean_acc={acc:6.2f}")
    return _emit(ctx, recs)


def cmd_eval_grid(ctx: Context) -> list[ResultRecord]:
    _, test = ctx.datasets()
    nets = ctx.load_models()
    e = ctx.cfg["eval"]
    grid = eval_grid(nets, e["deltas"], test, e["attack_steps"], derive_seed(ctx.seed, "eval"),
                     jobs=ctx.jobs)
    recs = []
    for i, eps in enumerate(grid.model_epsilons):
        for j, delta in enumerate(grid.attack_deltas):
            recs.append(ctx.record("robust_err", {"model_eps": _num(eps), "attack": "pgd",
                                                  "delta": _num(delta), "steps": e["attack_steps"]},
                                   grid.errors[i, j]))
    print(reports.format_grid(grid))
    for delta in grid.attack_deltas:
        if delta > 0:
            c = select_overdesign(grid, delta)
            print(f"delta={_num(delta)}: eps*={_num(c.epsilon_star)} ({c.selection_mode})")
    return _emit(ctx, recs)


def cmd_quant_sweep(ctx: Context) -> list[ResultRecord]:
    _, test = ctx.datasets()
    nets = ctx.load_models()
    q = ctx.cfg["quant"]
    recs = []
    x, y = test.images, test.labels
    for eps, net in nets.items():
        for beta in q["betas"]:
            for tap in q["taps"]:
                acc = models.accuracy(net, x, y, {tap: QuantTap(beta, tap)})
                recs.append(ctx.record("quant_acc", {"model_eps": _num(eps), "attack": "clean",
                                                     "delta": 0, "tap": tap, "beta": beta}, acc))
        recs.append(ctx.record("quant_acc", {"model_eps": _num(eps), "attack": "clean", "delta": 0,
                                             "tap": "none", "beta": None},
                               models.accuracy(net, x, y)))
        for delta in q["deltas"]:
            cfg = AttackConfig(epsilon_int=delta, steps=q["attack_steps"],
                               seed=derive_seed(ctx.seed, "quant", eps, delta))
            base = pgd(net, None, x, y, cfg)
            for kind in q["attacks"]:
                recs.append(ctx.record("quant_acc", {"model_eps": _num(eps), "attack": kind,
                                                     "delta": _num(delta), "tap": "none",
                                                     "beta": None}, base.accuracy, cfg.seed))
                for beta in q["betas"]:
                    for tap in q["taps"]:
                        taps = {tap: QuantTap(beta, tap)}
                        if kind == "transfer":
                            res = transfer_pgd(net, taps, x, y, cfg)
                        else:
                            res = bpda_pgd(net, taps, x, y, cfg)
                        recs.append(ctx.record("quant_acc", {"model_eps": _num(eps), "attack": kind,
                                                             "delta": _num(delta), "tap": tap,
                                                             "beta": beta}, res.accuracy, cfg.seed))
        print(f"eps={_num(eps)}: quant sweep done")
    return _emit(ctx, recs)


def cmd_filter_norms(ctx: Context) -> list[ResultRecord]:
    recs = []
    for eps, net in ctx.load_models().items():
        rep = analysis.filter_norms(net)
        for row in rep.layers:
            for stat in ("count", "mean_linf", "max_linf"):
                recs.append(ctx.record("filter_norms", {"model_eps": _num(eps), "layer": row.layer,
                                                        "stat": stat}, getattr(row, stat)))
            print(f"eps={_num(eps):>4} {row.layer:<14} mean={row.mean_linf:.4f} max={row.max_linf:.4f}")
    return _emit(ctx, recs)


def cmd_preact_stats(ctx: Context) -> list[ResultRecord]:
    _, test = ctx.datasets()
    a = ctx.cfg["analysis"]
    specs = analysis.default_specs(a["corruptions"], a["severities"], derive_seed(ctx.seed, "corrupt"))
    recs = []
    for eps, net in ctx.load_models().items():
        tap = a["preact_tap"] or net.pre_final_activation_tap
        st = analysis.preact_mean(net, test, tap)
        recs.append(ctx.record("preact_mean", {"model_eps": _num(eps), "tap": tap,
                                               "corruption": "none"}, st.mean))
        # the corrupted-set mean mirrors the evaluation on corrupted data
        corrupted = np.concatenate([analysis.corrupt(test.images, s) for s in specs])
        labels = np.tile(test.labels, len(specs))
        cds = DatasetHandle(test.name, test.split, corrupted, labels, test.class_names)
        st_c = analysis.preact_mean(net, cds, tap)
        recs.append(ctx.record("preact_mean", {"model_eps": _num(eps), "tap": tap,
                                               "corruption": "all"}, st_c.mean))
        print(f"eps={_num(eps):>4} {tap}: clean mean={st.mean:+.5f}  corrupted mean={st_c.mean:+.5f}")
    return _emit(ctx, recs)


def cmd_corrupt_eval(ctx: Context) -> list[ResultRecord]:
    train, test = ctx.datasets()
    a = ctx.cfg["analysis"]
    data = test if a["corrupt_split"] == "test" else train
    specs = analysis.default_specs(a["corruptions"], a["severities"], derive_seed(ctx.seed, "corrupt"))
    table = analysis.corruption_eval(ctx.load_models(), specs, data)
    recs = []
    for i, eps in enumerate(table.model_keys):
        for j, spec in enumerate(table.specs):
            recs.append(ctx.record("corruption_acc", {"model_eps": _num(eps), "corruption": spec.kind,
                                                      "severity": spec.severity},
                                   table.accuracy[i, j], spec.seed))
        recs.append(ctx.record("corruption_acc", {"model_eps": _num(eps), "corruption": "average",
                                                  "severity": None}, table.average[i]))
        print(f"eps={_num(eps):>4} average corruption accuracy {table.average[i]:6.2f}")
    return _emit(ctx, recs)


def cmd_report(ctx: Context) -> list[ResultRecord]:
    paths = reports.write_all(ctx.store, ctx.out / "reports")
    for p in paths:
        print(p)
    print((ctx.out / "reports" / "summary.txt").read_text())
    return []


COMMANDS = {
    "train-spectrum": cmd_train_spectrum,
    "eval-grid": cmd_eval_grid,
    "quant-sweep": cmd_quant_sweep,
    "filter-norms": cmd_filter_norms,
    "preact-stats": cmd_preact_stats,
    "corrupt-eval": cmd_corrupt_eval,
    "report": cmd_report,
}


def run(subcommand: str, resolved: dict, out: str | Path, jobs: int = 1) -> list[ResultRecord]:
    if subcommand not in COMMANDS:
        raise ValueError(f"unknown subcommand {subcommand!r}; expected one of {SUBCOMMANDS}")
    return COMMANDS[subcommand](Context(resolved, out, jobs))
