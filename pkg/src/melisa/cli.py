"""Command-line entry point: generate, train, rollout, evaluate, spectra.

Every verb reads a flat key=value config (``--config``) and works inside a
run directory (``--out``, default ``out_dir`` from the config)::

    <out>/data/{train,val,test}.mltr, dataset.json
    <out>/train/checkpoint.mlsa, loss.csv, train.json
    <out>/rollout/traj<i>_m<m>.mltr, rollout.json
    <out>/eval/metrics_short.csv, metrics_full.csv, metrics.txt, eval.json

Exit codes: 1 config, 2 data, 3 non-finite numerics, 4 internal error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io as _io
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import metrics as M
from .autodiff import NonFiniteError
from .backbone import NetConfig, load_checkpoint
from .io import (ConfigError, DataFormatError, atomic_write_text, bind, load_config,
                 read_manifest, read_trajectories, write_manifest, write_trajectories)
from .rollout import RolloutConfig, block_count, member_seed, timed_rollout
from .solver import SolverConfig, generate_dataset, split_counts
from .trainer import TrainConfig, TrainingDiverged, train

log = logging.getLogger("melisa")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_INTERNAL = 1, 2, 3, 4
SPLITS = ("train", "val", "test")
# fields derived from the data, never read from a config
_DERIVED_NET = {"window", "channels", "height", "width_s", "data_scale"}


@dataclass(frozen=True)
class GenerateConfig:
    n_traj: int = 8
    n_frames: int = 320
    burn_in: int = 2000
    data_seed: int = 0
    split_train: float = 0.625
    split_val: float = 0.125
    split_test: float = 0.25


@dataclass(frozen=True)
class RunConfig:
    out_dir: str = "run"
    log_level: str = "INFO"


@dataclass
class Settings:
    run: RunConfig
    solver: SolverConfig
    generate: GenerateConfig
    net: NetConfig
    train: TrainConfig
    rollout: RolloutConfig

    def snapshot(self) -> dict:
        return {k: _jsonable(asdict(getattr(self, k)))
                for k in ("run", "solver", "generate", "net", "train", "rollout")}


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def load_settings(path) -> Settings:
    """Parse a config file; every key must belong to a known section."""
    raw = load_config(path) if path is not None else {}
    used: set[str] = set()

    def take(cls, prefix=""):
        obj, keys = bind(cls, raw, prefix)
        used.update(keys)
        return obj

    run = take(RunConfig)
    solver = take(SolverConfig)
    gen = take(GenerateConfig)
    net_keys = {f"net_{f.name}" for f in fields(NetConfig) if f.name in _DERIVED_NET}
    bad = net_keys & raw.keys()
    if bad:
        raise ConfigError(f"{sorted(bad)} are derived from the data and cannot be set")
    net = take(NetConfig, "net_")
    tr = take(TrainConfig)
    ro = take(RolloutConfig, "rollout_")
    unknown = sorted(set(raw) - used)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        ro.check(tr.window)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return Settings(run, solver, gen, net, tr, ro)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _out(args, st: Settings) -> Path:
    return Path(args.out if args.out else st.run.out_dir)


def _rel(path: Path, root: Path) -> str:
    """``path`` relative to the run directory when it lies inside it."""
    try:
        return str(path.resolve().relative_to(root.resolve()))
    except ValueError:
        return str(path)


def _dataset(out: Path) -> tuple[dict, Path]:
    man = out / "data" / "dataset.json"
    if not man.exists():
        raise DataFormatError(f"dataset manifest not found: {man} (run 'generate' first)")
    return read_manifest(man), man.parent


def load_split(out: Path, split: str) -> np.ndarray:
    man, root = _dataset(out)
    if split not in man["files"]:
        raise DataFormatError(f"{root / 'dataset.json'}: no '{split}' split")
    data = read_trajectories(root / man["files"][split])
    if data.shape[0] == 0:
        raise DataFormatError(f"{root / man['files'][split]}: empty '{split}' split")
    return data


# -- verbs ----------------------------------------------------------------------


def cmd_generate(args, st: Settings) -> None:
    out = _out(args, st) / "data"
    g = st.generate
    seed = g.data_seed if args.seed is None else args.seed
    fractions = (g.split_train, g.split_val, g.split_test)
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions {fractions} do not sum to 1")
    start = _now()
    data, labels = generate_dataset(st.solver, g.n_traj, g.n_frames, g.burn_in, seed, fractions)
    files, crcs, counts = {}, {}, {}
    for split in SPLITS:
        idx = [i for i, lab in enumerate(labels) if lab == split]
        counts[split] = len(idx)
        if not idx:
            continue
        files[split] = f"{split}.mltr"
        crcs[split] = write_trajectories(out / files[split], data[idx])
    write_manifest(out / "dataset.json", {
        "command": "generate", "config": st.snapshot(), "seed": seed,
        "files": files, "crc32": crcs, "counts": counts,
        "shape": [g.n_frames, 1, st.solver.n, st.solver.n],
        "start": start, "end": _now(),
    })
    log.info("wrote %s", counts)


def cmd_train(args, st: Settings) -> None:
    if args.resume:
        raise ConfigError("resuming training is not supported; start a fresh run")
    out = _out(args, st)
    data = load_split(out, "train")
    cfg = st.train if args.seed is None else TrainConfig(**{**asdict(st.train), "seed": args.seed})
    start = _now()
    t0 = time.perf_counter()
    try:
        net, rows = train(data, cfg, st.net, out / "train")
    except TrainingDiverged as exc:
        write_manifest(out / "train" / "train.json", {
            "command": "train", "config": st.snapshot(), "seed": cfg.seed,
            "failed_step": exc.step, "start": start, "end": _now()})
        raise
    write_manifest(out / "train" / "train.json", {
        "command": "train", "config": st.snapshot(), "seed": cfg.seed,
        "steps": len(rows), "parameters": net.parameter_count(),
        "data_scale": net.config.data_scale, "final_total": rows[-1][3],
        "start": start, "end": _now(), "seconds": time.perf_counter() - t0,
    })


def cmd_rollout(args, st: Settings) -> None:
    out = _out(args, st)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "train" / "checkpoint.mlsa"
    if not ckpt.exists():
        raise DataFormatError(f"checkpoint not found: {ckpt}")
    try:
        net = load_checkpoint(ckpt)
    except ValueError as exc:
        raise DataFormatError(f"{ckpt}: {exc}") from exc
    test = load_split(out, "test")
    ro = st.rollout
    horizon = ro.horizon if args.horizon is None else args.horizon
    members = ro.ensemble if args.ensemble is None else args.ensemble
    base = ro.seed if args.seed is None else args.seed
    block = RolloutConfig(ro.context, horizon, members, base).check(net.config.window)
    if test.shape[2:] != (net.config.channels, net.config.height, net.config.width_s):
        raise DataFormatError(f"test frames {test.shape[2:]} do not match the checkpoint")
    rdir = out / "rollout"
    records = []
    start = _now()
    for i in range(test.shape[0]):
        for m in range(members):
            seed = member_seed(base, m)
            pred, rec = timed_rollout(net, test[i, :ro.context], horizon, seed, ro.context)
            if rec["nfe"] != block_count(horizon, block):
                raise RuntimeError(f"NFE {rec['nfe']} != {block_count(horizon, block)}")
            name = f"traj{i}_m{m}.mltr"
            write_trajectories(rdir / name, pred[None])
            records.append({"trajectory": i, "member": m, "file": name, **rec})
    write_manifest(rdir / "rollout.json", {
        "command": "rollout", "config": st.snapshot(), "checkpoint": _rel(ckpt, out),
        "seed": base, "horizon": horizon, "ensemble": members, "context": ro.context,
        "block": block, "nfe_per_rollout": block_count(horizon, block),
        "trajectories": int(test.shape[0]), "records": records,
        "start": start, "end": _now(),
    })


def load_forecasts(out: Path) -> tuple[np.ndarray, dict]:
    """(M, B, T, C, H, W) forecasts plus the rollout manifest."""
    rdir = out / "rollout"
    man_path = rdir / "rollout.json"
    if not man_path.exists():
        raise DataFormatError(f"rollout manifest not found: {man_path} (run 'rollout' first)")
    man = read_manifest(man_path)
    b, mcount = man["trajectories"], man["ensemble"]
    grid = [[None] * b for _ in range(mcount)]
    for rec in man["records"]:
        grid[rec["member"]][rec["trajectory"]] = read_trajectories(rdir / rec["file"])[0]
    if any(x is None for row in grid for x in row):
        raise DataFormatError(f"{man_path}: incomplete forecast set")
    return np.stack([np.stack(row) for row in grid]), man


def cmd_evaluate(args, st: Settings) -> None:
    out = _out(args, st)
    ens, man = load_forecasts(out)
    ctx, horizon = man["context"], man["horizon"]
    test = load_split(out, "test")
    if ctx + horizon > test.shape[1]:
        raise DataFormatError(f"forecast of {horizon} frames after {ctx} context frames "
                              f"exceeds reference length {test.shape[1]}")
    ref = test[:, ctx:ctx + horizon]
    pred = ens[0]
    edir = out / "eval"
    reports = {}
    for label, t_eval in (("short", M.short_horizon(horizon)), ("full", horizon)):
        rep = M.evaluate(pred, ref, t_eval, ens if ens.shape[0] > 1 else None, label)
        reports[label] = rep
        atomic_write_text(edir / f"metrics_{label}.csv", rep.to_csv())
    atomic_write_text(edir / "metrics.txt", "".join(r.to_table() for r in reports.values()))
    write_manifest(edir / "eval.json", {
        "command": "evaluate", "config": st.snapshot(), "horizon": horizon, "context": ctx,
        "ensemble": int(ens.shape[0]),
        "notes": reports["full"].notes,
        "summary": {lab: {k: r.summary(k) for k in M.METRIC_ORDER} for lab, r in reports.items()},
    })
    print("".join(r.to_table() for r in reports.values()), end="")


def _csv(rows, header) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def cmd_spectra(args, st: Settings) -> None:
    if not args.files:
        raise ConfigError("spectra needs at least one trajectory file")
    out = Path(args.out if args.out else st.run.out_dir) / "spectra"
    spec_rows, acf_rows = [], []
    for path in args.files:
        data = read_trajectories(path)
        name = Path(path).name
        h, w = data.shape[-2:]
        k_r = M.default_bins(h, w)
        frames = data.reshape((-1,) + data.shape[2:])
        prof = np.mean([M.normalized_profile(M.radial_spectrum(f).power, k_r) for f in frames], axis=0)
        spec_rows += [[name, k, repr(float(p))] for k, p in enumerate(prof)]
        tke = M.tke_map(data).sum(axis=0)
        atomic_write_text(out / f"{Path(path).stem}_tke.csv",
                          "\n".join(",".join(repr(float(v)) for v in row) for row in tke) + "\n")
        k = M.default_lags(data.shape[1])
        acf_rows += [[name, lag, repr(float(c))] for lag, c in enumerate(M.autocorrelation(data, k))]
    atomic_write_text(out / "spectra.csv", _csv(spec_rows, ["file", "bin", "power"]))
    atomic_write_text(out / "autocorrelation.csv", _csv(acf_rows, ["file", "lag", "acf"]))


VERBS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "rollout": cmd_rollout,
    "evaluate": cmd_evaluate,
    "spectra": cmd_spectra,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="melisa", description="Window-conditioned one-step flow surrogate.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    for verb in VERBS:
        s = sub.add_parser(verb)
        s.add_argument("--config", help="key=value config file")
        s.add_argument("--out", help="run directory (default: out_dir from the config)")
        s.add_argument("--seed", type=int, help="override the verb's seed")
        s.add_argument("--checkpoint", help="checkpoint path (rollout)")
        s.add_argument("--horizon", type=int, help="forecast frames (rollout)")
        s.add_argument("--ensemble", type=int, help="ensemble members (rollout)")
        if verb == "train":
            s.add_argument("--resume", action="store_true", help="not supported")
        if verb == "spectra":
            s.add_argument("files", nargs="*", help="trajectory files")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        st = load_settings(args.config)
        logging.basicConfig(level=getattr(logging, st.run.log_level.upper(), logging.INFO),
                            format="%(asctime)s %(name)s %(levelname)s %(message)s")
        VERBS[args.verb](args, st)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
