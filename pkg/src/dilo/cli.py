"""Command-line entry point: ``dilo <subcommand> [--config FILE] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import io as dio
from .checkpoint import load_bundle, load_surrogate, save_bundle, save_surrogate
from .diffusion import make_schedule
from .inversion import InversionConfig, dilo_invert, dps_baseline, ood_diagnostic, reconstruct
from .networks import SpectralArch, build_bundle, relative_reconstruction_error, train_autoencoder, train_score
from .physics.data import gen_dataset
from .physics.eit import trig_patterns
from .surrogate import ExactSurrogate, surrogate_eval, train_surrogate
from .tensor_core import OptimizerConfig

log = logging.getLogger("dilo")


def _write_json(path, obj) -> None:
    dio.atomic_write(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode())


def _schedule(cfg: dio.RunConfig):
    s = cfg.schedule
    return make_schedule(s.T_train, s.beta_start, s.beta_end, s.n_substeps)


def _load_data(path):
    path = Path(path)
    params = dio.read_tensor(path / "params.tnsr")
    obs_path = path / "observations.tnsr"
    return params, (dio.read_tensor(obs_path) if obs_path.exists() else None)


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise ValueError(f"--{n.replace('_', '-')} is required for {args.cmd}")


# --- subcommands ------------------------------------------------------------------


def cmd_gen_data(args, cfg):
    _require(args, "out")
    ph = cfg.physics
    ds = gen_dataset(
        ph.problem,
        ph.n_samples,
        dio.derive_seed(args.seed, "gen-data"),
        grid=ph.grid,
        patterns=trig_patterns(ph.grid, ph.patterns) if ph.problem == "eit-blobs" else None,
        ns_time=ph.ns_time,
        ns_dt=ph.ns_dt,
    )
    out = Path(args.out)
    dio.write_tensor(out / "params.tnsr", ds.params)
    if ds.observations is not None:
        dio.write_tensor(out / "observations.tnsr", ds.observations)
    return {"kind": ds.kind, "count": len(ds), "grid": ds.grid}


def cmd_train_ae(args, cfg):
    _require(args, "data", "out")
    params, _ = _load_data(args.data)
    n_train = len(params) - cfg.surrogate.n_heldout
    ae = cfg.ae
    bundle = build_bundle(
        grid=params.shape[-1],
        latent_dim=ae.latent_dim,
        schedule=_schedule(cfg),
        seed=dio.derive_seed(args.seed, "init"),
        hidden=cfg.ldm.hidden,
        ae_hidden=(ae.hidden1, ae.hidden2),
        temb_dim=cfg.ldm.temb_dim,
    )
    losses = train_autoencoder(
        bundle,
        params[:n_train],
        ae.epochs,
        OptimizerConfig("adam", ae.lr),
        seed=dio.derive_seed(args.seed, "train-ae"),
        batch_size=ae.batch_size,
    )
    save_bundle(args.out, bundle)
    rel = relative_reconstruction_error(bundle, params[n_train:]) if n_train < len(params) else np.array([np.nan])
    return {"losses": losses, "heldout_rel_error": float(np.mean(rel))}


def cmd_train_ldm(args, cfg):
    _require(args, "data", "ckpt")
    params, _ = _load_data(args.data)
    n_train = len(params) - cfg.surrogate.n_heldout
    bundle = load_bundle(args.ckpt)
    ldm = cfg.ldm
    losses = train_score(
        bundle,
        bundle.encode(params[:n_train]),
        ldm.epochs,
        OptimizerConfig("adam", ldm.lr),
        seed=dio.derive_seed(args.seed, "train-ldm"),
        batch_size=ldm.batch_size,
    )
    save_bundle(args.out or args.ckpt, bundle)
    return {"losses": losses}


def cmd_train_surrogate(args, cfg):
    _require(args, "data", "out")
    params, obs = _load_data(args.data)
    if obs is None:
        raise ValueError(f"{args.data} holds no observations")
    s = cfg.surrogate
    arch = SpectralArch(
        params.shape[-1], s.modes, s.width, s.n_blocks, out_channels=obs.shape[1], proj_width=s.proj_width
    )
    res = train_surrogate(
        params,
        obs,
        arch,
        s.epochs,
        OptimizerConfig("adam", s.lr),
        seed=dio.derive_seed(args.seed, "train-surrogate"),
        batch_size=s.batch_size,
        n_heldout=min(s.n_heldout, len(params) - 1),
    )
    save_surrogate(args.out, res.handle)
    return {"losses": res.losses, "heldout_rel_error": res.heldout_rel_error}


def _problem(args, cfg):
    """Bundle, surrogate handle, exact handle, target field and observations for one instance."""
    _require(args, "ckpt")
    bundle = load_bundle(args.ckpt)
    inv = cfg.invert
    exact = ExactSurrogate(trig_patterns(bundle.grid, cfg.physics.patterns))
    if inv.surrogate == "exact":
        handle = exact
    elif inv.surrogate == "neural":
        _require(args, "surrogate_ckpt")
        handle = load_surrogate(args.surrogate_ckpt)
    else:
        raise ValueError(f"[invert] surrogate must be 'exact' or 'neural', got {inv.surrogate!r}")
    if inv.target == "oracle":
        z_star = np.random.default_rng(dio.derive_seed(args.seed, "target")).standard_normal(bundle.latent_dim)
        a_true = reconstruct(bundle, z_star)
    elif inv.target == "dataset":
        _require(args, "data")
        a_true = _load_data(args.data)[0][inv.instance]
    else:
        raise ValueError(f"[invert] target must be 'oracle' or 'dataset', got {inv.target!r}")
    y = surrogate_eval(exact, a_true)
    return bundle, handle, exact, a_true, y


def _inv_config(args, cfg) -> InversionConfig:
    inv = cfg.invert
    return InversionConfig(
        iterations=inv.iterations,
        optimizer=inv.optimizer,
        lr=inv.lr,
        seed=dio.derive_seed(args.seed, "invert"),
        weight_decay=inv.weight_decay,
        noise=inv.noise,
    )


def cmd_invert(args, cfg):
    _require(args, "out")
    bundle, handle, exact, a_true, y = _problem(args, cfg)
    res = dilo_invert(y, bundle, handle, _inv_config(args, cfg), a_true=a_true)
    out = Path(args.out)
    dio.emit_metrics(out / "metrics.csv", res.diagnostics, timing=args.timing)
    dio.write_tensor(out / "a_hat.tnsr", res.a_hat)
    dio.write_tensor(out / "z_T.tnsr", res.z_T)
    d = res.diagnostics
    return {
        "initial_loss": d.loss[0],
        "best_loss": res.loss,
        "iterations": len(d),
        "stop_reason": d.stop_reason,
        "mae": float(np.mean(np.abs(res.a_hat - a_true))),
        "measurement_loss": 0.5 * float(np.sum((surrogate_eval(exact, res.a_hat) - y) ** 2)),
    }


def cmd_dps(args, cfg):
    _require(args, "out")
    bundle, handle, exact, a_true, y = _problem(args, cfg)
    res = dps_baseline(y, bundle, handle, cfg.invert.guidance, _inv_config(args, cfg))
    out = Path(args.out)
    dio.write_tensor(out / "a_hat.tnsr", res.a_hat)
    rows = "t,residual\n" + "".join(f"{t},{r:.17g}\n" for t, r in zip(res.timesteps, res.residuals))
    dio.atomic_write(out / "residuals.csv", rows.encode())
    return {
        "final_loss": res.loss,
        "mae": float(np.mean(np.abs(res.a_hat - a_true))),
        "measurement_loss": 0.5 * float(np.sum((surrogate_eval(exact, res.a_hat) - y) ** 2)),
    }


def cmd_ood(args, cfg):
    _require(args, "out")
    bundle, handle, _, a_true, y = _problem(args, cfg)
    curve = ood_diagnostic(bundle, handle, a_true, y, seed=dio.derive_seed(args.seed, "ood"))
    rows = "t,residual\n" + "".join(f"{t},{r:.17g}\n" for t, r in zip(curve.timesteps, curve.residuals))
    dio.atomic_write(Path(args.out) / "ood.csv", rows.encode())
    return {"endpoint_ratio": curve.endpoint_ratio, "clean_residual": curve.clean_residual}


def cmd_verify(args, cfg):
    from .verify import run_suite

    checks = run_suite()
    for c in checks:
        print(c.line())
    failed = [c.name for c in checks if not c.passed]
    summary = {"checks": [asdict(c) for c in checks], "failed": failed}
    if failed:
        raise RuntimeError(f"{len(failed)} oracle check(s) failed: {', '.join(failed)}")
    return summary


def cmd_report(args, cfg):
    _require(args, "runs")
    rows = []
    for path in sorted(Path(args.runs).rglob("summary.json")):
        data = json.loads(path.read_text())
        res = data.get("result", {})
        rows.append({"run": str(path.parent), "command": data.get("command"), **{
            k: v for k, v in res.items() if isinstance(v, (int, float, str)) or v is None
        }})
    for r in rows:
        print(" ".join(f"{k}={v}" for k, v in r.items()))
    return {"runs": rows}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-ae": cmd_train_ae,
    "train-ldm": cmd_train_ldm,
    "train-surrogate": cmd_train_surrogate,
    "invert": cmd_invert,
    "dps-baseline": cmd_dps,
    "ood-diag": cmd_ood,
    "verify": cmd_verify,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dilo", description="Latent diffusion optimisation for PDE inverse problems.")
    sub = p.add_subparsers(dest="cmd", required=True, metavar="COMMAND")
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="run configuration file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in ("train-ae", "train-ldm", "train-surrogate", "invert", "dps-baseline", "ood-diag"):
            sp.add_argument("--data", help="dataset directory written by gen-data")
        if name in ("train-ldm", "invert", "dps-baseline", "ood-diag"):
            sp.add_argument("--ckpt", help="bundle checkpoint directory")
            sp.add_argument("--surrogate-ckpt", help="neural surrogate checkpoint directory")
        if name in ("invert", "dps-baseline", "ood-diag"):
            sp.add_argument("--seeds", help="comma-separated seeds; runs each into OUT/seed_<k>")
        if name == "invert":
            sp.add_argument("--timing", action="store_true", help="fill the wallclock_ms column")
        if name == "report":
            sp.add_argument("--runs", help="directory tree holding summary.json files")
    return p


def _run_one(args, cfg) -> dict:
    result = COMMANDS[args.cmd](args, cfg)
    if args.out:
        _write_json(Path(args.out) / "summary.json", {"command": args.cmd, "seed": args.seed, "result": result})
    return result


def _run_seed(argv_seed):
    args, cfg, seed = argv_seed
    args = argparse.Namespace(**{**vars(args), "seed": seed, "out": str(Path(args.out) / f"seed_{seed}")})
    return _run_one(args, cfg)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = dio.load_config(args.config)
        seeds = getattr(args, "seeds", None)
        if seeds:
            _require(args, "out")
            seeds = [int(s) for s in seeds.split(",") if s.strip()]
            jobs = [(args, cfg, s) for s in seeds]
            workers = min(dio.thread_count(), len(jobs))
            if workers > 1:
                with ProcessPoolExecutor(workers) as pool:
                    list(pool.map(_run_seed, jobs))
            else:
                for job in jobs:
                    _run_seed(job)
        else:
            _run_one(args, cfg)
    except Exception as exc:  # one-line diagnostic, no traceback
        print(f"dilo {args.cmd}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
