"""Command line entry point: ``memshard <subcommand> ...``.

Exit codes: 0 success, 1 failed verification, 2 configuration or usage error,
3 numeric failure. Inputs are never modified; everything is written under
``--out``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import Dataset, load_dataset, save_dataset
from .diffusion import dumps_checkpoint, loads_checkpoint
from .ensemble import (ExperimentConfig, metrics_csv, model_setup, resolve_workers,
                       run_experiment, shard_checkpoint_extra)
from .errors import InvalidConfigError, NumericError
from .evaluation import (DEFAULT_THRESHOLDS, evaluate_model, gap_fraction, loss_gap_curves,
                         nn_distances, skip_count_histogram, spectral_energy, top_memorized)
from .synth import SynthSpec, synth_dataset
from .verify import check_pairs, dataset_ok, run_invariants


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise InvalidConfigError(f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"{path} is not valid JSON: {exc}") from exc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _csv_header(h: dict) -> str:
    return "# " + ",".join(f"{k}={v}" for k, v in sorted(h.items())) + "\n"


def _thresholds(text: str | None):
    if text is None:
        return DEFAULT_THRESHOLDS
    try:
        vals = sorted(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise InvalidConfigError(f"bad --thresholds {text!r}") from exc
    if not vals:
        raise InvalidConfigError("--thresholds is empty")
    return tuple(vals)


def _load_data(args) -> Dataset:
    if not args.data:
        raise InvalidConfigError("--data is required")
    data = Path(args.data)
    if not data.exists():
        raise InvalidConfigError(f"no such dataset: {data}")
    labels = getattr(args, "labels", None)
    if labels is None and (data.parent / "labels.json").exists():
        labels = data.parent / "labels.json"
    return load_dataset(data, labels)


def _data_header(ds: Dataset) -> dict:
    return {"data_hash": ds.header.get("config_hash"), "data_seed": ds.header.get("seed")}


def _load_checkpoint(path):
    try:
        text = Path(path).read_text()
    except FileNotFoundError as exc:
        raise InvalidConfigError(f"no such checkpoint: {path}") from exc
    return loads_checkpoint(text)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    spec = SynthSpec.from_dict(_read_json(args.config)) if args.config else SynthSpec()
    if args.seed is not None:
        spec = SynthSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    out = _out_dir(args)
    ds = synth_dataset(spec)
    save_dataset(ds, out / "dataset.json", out / "labels.json")
    (out / "synth_config.json").write_text(json.dumps(
        {"header": {"config_hash": ds.header["config_hash"], "seed": spec.seed},
         "spec": spec.to_dict()}, sort_keys=True, indent=1) + "\n")
    return 0


def cmd_train(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    data_path = args.data or raw.pop("data", None)
    raw.pop("data", None)
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = ExperimentConfig.from_dict(raw)
    args.data = data_path
    ds = _load_data(args)
    workers = resolve_workers(args.workers)
    out = _out_dir(args)
    header = {"config_hash": cfg.hash(), "seed": cfg.seed, **_data_header(ds)}
    ckdir = out / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    last_round = cfg.M

    def on_interaction(m, event, global_params, shards):
        if global_params is not None:
            (ckdir / f"round_{m:03d}_global.json").write_text(
                dumps_checkpoint(global_params, sched, {"header": {**header, "round": m, "event": event}}))
        if args.shard_checkpoints == "all" or (args.shard_checkpoints == "last" and m == last_round
                                               and event != "final-aggregate"):
            for s in shards:
                extra = {"header": {**header, "round": m, "event": event}, **shard_checkpoint_extra(s)}
                (ckdir / f"round_{m:03d}_shard_{s.shard_id}.json").write_text(
                    dumps_checkpoint(s.params, sched, extra))

    sched, _ = model_setup(cfg, ds.D)
    res = run_experiment(cfg, ds, workers=workers, on_interaction=on_interaction)
    (out / "final.json").write_text(dumps_checkpoint(res.params, res.sched, {"header": header}))
    (out / "metrics.csv").write_text(metrics_csv(res.metrics, header))
    (out / "history.json").write_text(json.dumps(
        {"header": header, "config": cfg.to_dict(), "history": res.history,
         "skip_totals": {str(k): v for k, v in sorted(res.skip_totals.items())}},
        sort_keys=True) + "\n")
    return 0


def cmd_eval_mem(args) -> int:
    ds = _load_data(args)
    params, sched, extra = _load_checkpoint(args.checkpoint)
    seed = 0 if args.seed is None else args.seed
    rep = evaluate_model(params, sched, ds, n_gen=args.n_gen, seed=seed,
                         thresholds=_thresholds(args.thresholds))
    ck = extra.get("header", {})
    rep.header = {"config_hash": ck.get("config_hash"), "seed": seed, **_data_header(ds),
                  "n_gen": args.n_gen}
    out = _out_dir(args)
    (out / "report.json").write_text(rep.dumps())
    (out / "ell_values.csv").write_text(_csv_header(rep.header) + rep.ell_csv())
    return 0


def cmd_analyze_loss(args) -> int:
    ds = _load_data(args)
    params, sched, extra = _load_checkpoint(args.checkpoint)
    seed = 0 if args.seed is None else args.seed
    if args.mode == "planted":
        mask = ds.duplicated_mask
        if not mask.any():
            raise InvalidConfigError("planted mode needs a labels file with duplicate groups")
        a_rows, b_rows = np.flatnonzero(mask), np.flatnonzero(~mask)
    else:
        rep = evaluate_model(params, sched, ds, n_gen=args.n_gen, seed=seed)
        top = top_memorized(rep, args.top_k)
        a_rows = ds.rows(top)
        b_rows = np.setdiff1d(np.arange(len(ds)), a_rows)
    rng = np.random.default_rng([seed, 0x10])
    if len(b_rows) > args.max_set:
        b_rows = np.sort(rng.choice(b_rows, size=args.max_set, replace=False))
    ca, cb = loss_gap_curves(params, sched, ds.pixels[a_rows], ds.pixels[b_rows], args.reps, seed)
    header = {"config_hash": extra.get("header", {}).get("config_hash"), "seed": seed,
              **_data_header(ds), "gap_fraction": format(gap_fraction(ca, cb), ".6g")}
    lines = [_csv_header(header), "t,loss_memorized,loss_other\n"]
    lines += [f"{t},{ca[t - 1]:.17g},{cb[t - 1]:.17g}\n" for t in range(1, sched.T + 1)]
    (_out_dir(args) / "loss_gap.csv").write_text("".join(lines))
    return 0


def _skip_totals(run_dir) -> tuple[dict[int, int], dict]:
    hist = _read_json(Path(run_dir) / "history.json")
    return {int(k): int(v) for k, v in hist["skip_totals"].items()}, hist.get("header", {})


def cmd_analyze_skips(args) -> int:
    ds = _load_data(args)
    totals, run_header = _skip_totals(args.run)
    nn = nn_distances(np.arange(len(ds)), ds.pixels)
    header = {"config_hash": run_header.get("config_hash"), "seed": run_header.get("seed"),
              **_data_header(ds)}
    rows = [_csv_header(header), "id,skip_total,duplicated,nn_distance\n"]
    for r, i in enumerate(ds.ids):
        rows.append(f"{int(i)},{totals.get(int(i), 0)},{int(ds.duplicated_mask[r])},{nn[r]:.17g}\n")
    out = _out_dir(args)
    (out / "skip_counts.csv").write_text("".join(rows))
    counts, edges = skip_count_histogram({int(i): totals.get(int(i), 0) for i in ds.ids}, bins=args.bins)
    hist = [_csv_header(header), "bin_lo,bin_hi,count\n"]
    hist += [f"{edges[k]:.17g},{edges[k + 1]:.17g},{int(counts[k])}\n" for k in range(len(counts))]
    (out / "skip_histogram.csv").write_text("".join(hist))
    return 0


def cmd_analyze_spectra(args) -> int:
    ds = _load_data(args)
    totals, run_header = _skip_totals(args.run) if args.run else ({}, {})
    header = {"config_hash": run_header.get("config_hash", ds.header.get("config_hash")),
              "seed": run_header.get("seed", ds.header.get("seed")), **_data_header(ds)}
    rows = [_csv_header(header), "id,energy,skip_total,duplicated\n"]
    for r, i in enumerate(ds.ids):
        e = spectral_energy(ds.pixels[r], ds.H)
        rows.append(f"{int(i)},{e:.17g},{totals.get(int(i), 0)},{int(ds.duplicated_mask[r])}\n")
    (_out_dir(args) / "spectra.csv").write_text("".join(rows))
    return 0


def cmd_verify(args) -> int:
    results = [] if args.skip_invariants else run_invariants()
    if args.data:
        ds = _load_data(args)
        results.append(("dataset-range", *dataset_ok(ds)))
        others = [Path(p) for p in (args.artifact or [])]
        lab = Path(args.data).parent / "labels.json"
        if lab.exists():
            others.insert(0, lab)
        results += check_pairs(Path(args.data), others)
    elif args.artifact:
        raise InvalidConfigError("--artifact checks need --data")
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += not ok
    return 1 if failed else 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="memshard", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="master seed")
        if data:
            sp.add_argument("--data", help="dataset.json written by synth")
            sp.add_argument("--labels", help="labels.json (default: next to --data)")

    sp = sub.add_parser("synth", help="write a synthetic dataset")
    common(sp, data=False)
    sp.add_argument("--config", help="SynthSpec JSON")
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train", help="run an experiment or baseline")
    common(sp)
    sp.add_argument("--config", help="ExperimentConfig JSON")
    sp.add_argument("--workers", type=int, default=None, help="shard worker processes")
    sp.add_argument("--shard-checkpoints", choices=("all", "last", "none"), default="last")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval-mem", help="memorization report for a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--n-gen", type=int, default=4096)
    sp.add_argument("--thresholds", default=None, help="comma-separated ratio thresholds")
    sp.set_defaults(fn=cmd_eval_mem)

    sp = sub.add_parser("analyze-loss", help="per-timestep loss of memorized vs other images")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mode", choices=("planted", "generated"), default="planted")
    sp.add_argument("--reps", type=int, default=4)
    sp.add_argument("--max-set", type=int, default=512)
    sp.add_argument("--top-k", type=int, default=256)
    sp.add_argument("--n-gen", type=int, default=4096)
    sp.set_defaults(fn=cmd_analyze_loss)

    sp = sub.add_parser("analyze-skips", help="skip totals, histogram and NN distances")
    common(sp)
    sp.add_argument("--run", required=True, help="train output directory")
    sp.add_argument("--bins", type=int, default=20)
    sp.set_defaults(fn=cmd_analyze_skips)

    sp = sub.add_parser("analyze-spectra", help="Fourier energy per training image")
    common(sp)
    sp.add_argument("--run", default=None, help="train output directory (adds skip totals)")
    sp.set_defaults(fn=cmd_analyze_spectra)

    sp = sub.add_parser("verify", help="invariant suite and artifact header checks")
    sp.add_argument("--out", default=None, help="unused; accepted for symmetry")
    sp.add_argument("--data", default=None)
    sp.add_argument("--labels", default=None)
    sp.add_argument("--artifact", action="append", help="artifact to check against --data")
    sp.add_argument("--skip-invariants", action="store_true")
    sp.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except InvalidConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TypeError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
